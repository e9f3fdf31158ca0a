"""Point-cloud reconstruction scores and semantic segmentation scores.

All values are stored raw; the customary x1e-2 (CD-L1) and x1e-4 (CD-L2)
display scales are applied only by :func:`format_report`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySetError, ValidationError

DELTA = 0.005


def _cloud(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise EmptySetError(f"{name} cloud is empty")
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} cloud has non-finite coordinates")
    return a


def nearest_distances(src: np.ndarray, dst: np.ndarray, workers: int = -1) -> np.ndarray:
    """Euclidean distance from each ``src`` point to its nearest ``dst`` point."""
    d, _ = cKDTree(dst).query(src, k=1, workers=workers)
    return d


def _directed(pred, gt):
    pred, gt = _cloud(pred, "pred"), _cloud(gt, "gt")
    return nearest_distances(pred, gt), nearest_distances(gt, pred)


def chamfer(pred, gt) -> tuple[float, float]:
    """(cd_l1, cd_l2): each the mean of the two directed mean nearest distances."""
    a, b = _directed(pred, gt)
    cd_l1 = 0.5 * (a.mean() + b.mean())
    cd_l2 = 0.5 * ((a ** 2).mean() + (b ** 2).mean())
    return float(cd_l1), float(cd_l2)


def _f(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def precision_recall(pred, gt, delta: float = DELTA) -> tuple[float, float]:
    a, b = _directed(pred, gt)
    return float((a <= delta).mean()), float((b <= delta).mean())


def fscore(pred, gt, delta: float = DELTA) -> float:
    """Harmonic mean of precision and recall; a point matches when within ``delta``."""
    if delta < 0:
        raise ValidationError("delta must be >= 0")
    return _f(*precision_recall(pred, gt, delta))


@dataclass
class ReconstructionReport:
    cd_l1: float
    cd_l2: float
    fs_delta: float
    fs_2delta: float
    fs_4delta: float
    delta: float = DELTA
    n_pred: int = 0
    n_gt: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def reconstruction_report(pred, gt, delta: float = DELTA) -> ReconstructionReport:
    """All reconstruction scores from one pair of nearest-distance passes."""
    a, b = _directed(pred, gt)
    fs = [_f(float((a <= t).mean()), float((b <= t).mean())) for t in (delta, 2 * delta, 4 * delta)]
    return ReconstructionReport(
        cd_l1=float(0.5 * (a.mean() + b.mean())),
        cd_l2=float(0.5 * ((a ** 2).mean() + (b ** 2).mean())),
        fs_delta=fs[0], fs_2delta=fs[1], fs_4delta=fs[2],
        delta=delta, n_pred=len(a), n_gt=len(b),
    )


@dataclass
class SegmentationReport:
    iou: list[float]  # per class; NaN for classes absent from gt
    miou: float
    oa: float
    confusion: list[list[int]]  # rows gt, columns pred

    def to_json(self) -> str:
        d = asdict(self)
        d["iou"] = [None if np.isnan(v) else v for v in self.iou]
        return json.dumps(d, indent=2, sort_keys=True)


def seg_metrics(pred_labels, gt_labels, C: int) -> SegmentationReport:
    pred = np.asarray(pred_labels).astype(np.int64).ravel()
    gt = np.asarray(gt_labels).astype(np.int64).ravel()
    if C < 1:
        raise ValidationError("C must be >= 1")
    if len(pred) != len(gt):
        raise ValidationError(f"label length mismatch: {len(pred)} vs {len(gt)}")
    if len(gt) == 0:
        raise EmptySetError("no labels to score")
    for name, lab in (("pred", pred), ("gt", gt)):
        if lab.min() < 0 or lab.max() >= C:
            raise ValidationError(f"{name} labels must lie in [0, {C})")
    cm = np.bincount(gt * C + pred, minlength=C * C).reshape(C, C)
    tp = np.diag(cm).astype(np.float64)
    present = cm.sum(axis=1) > 0
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(C, np.nan)
    iou[present] = tp[present] / denom[present]
    return SegmentationReport(
        iou=iou.tolist(),
        miou=float(iou[present].mean()),
        oa=float(tp.sum() / cm.sum()),
        confusion=cm.tolist(),
    )


def format_report(r: ReconstructionReport) -> str:
    return (f"CD-L1 {r.cd_l1 * 1e2:.3f} (x1e-2)  CD-L2 {r.cd_l2 * 1e4:.3f} (x1e-4)  "
            f"FS {r.fs_delta:.3f}/{r.fs_2delta:.3f}/{r.fs_4delta:.3f} at delta={r.delta}")
