"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .dataset import QueryConfig, SceneRecord, make_scene_record
from .extraction import ModelField, extract_dense_points, label_points
from .metrics import ReconstructionReport, reconstruction_report, seg_metrics
from .model import RangeUDFParams, predict
from .pointnet import feature_cloud
from .scenes import build_scene, make_ambiguity_pair, random_room
from .training import TrainConfig, batch_loss, fit, train_step

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ambiguity pair


@dataclass
class AmbiguityResult:
    variant: str
    final_l1: float
    floor: float
    steps: int
    seconds: float
    curve: list[float] = field(default_factory=list)


AMBIGUITY_VARIANTS = {
    "full": {},
    "no_range_term": {"no_range_term": True},
    "bundle_only": {"no_range_term": True, "no_query_term": True},
    "idw": {"interp": "idw"},
}


def _eval_l1(scenes, params, cfg) -> float:
    """Mean unclamped l1 over every query of every scene."""
    full = replace(cfg, queries_per_scene=10**9, clamp=None, uncertainty=False)
    rng = np.random.default_rng(0)
    _, l1, _ = batch_loss(scenes, params, full, rng)
    return l1.item()


def run_ambiguity(variant: str = "full", offset: float = 0.05, steps: int = 2000, seed: int = 0,
                  n_queries: int = 512, lr: float = 1e-3, tol: float | None = None,
                  eval_every: int = 100) -> AmbiguityResult:
    """Train one variant on the ambiguity pair and report the final mean l1.

    With ``tol`` set, training stops at the first evaluation below it.
    """
    pair = make_ambiguity_pair(offset, n_queries=n_queries, seed=seed)
    scenes = [pair.first, pair.second]
    cfg = TrainConfig(batch_scenes=2, queries_per_scene=n_queries, K=4, lr=lr, seed=seed,
                      n_classes=1, uncertainty=False, clamp=None, train_encoder=False,
                      **AMBIGUITY_VARIANTS[variant])
    params = RangeUDFParams.init(cfg.model_config(), seed=seed)
    opt = tc.AdamState()
    rng = np.random.default_rng([seed, 0xAB])
    t0 = time.perf_counter()
    curve = []
    step = 0
    last = _eval_l1(scenes, params, cfg)
    while step < steps:
        train_step(scenes, params, opt, cfg, rng)
        step += 1
        if step % eval_every == 0 or step == steps:
            last = _eval_l1(scenes, params, cfg)
            curve.append(last)
            if tol is not None and last < tol:
                break
    floor = float(np.mean(np.abs(pair.first.queries.off_surface.udf - pair.second.queries.off_surface.udf)) / 2)
    return AmbiguityResult(variant, last, floor, step, time.perf_counter() - t0, curve)


# ---------------------------------------------------------------------------
# toy rooms


@dataclass
class ToyConfig:
    """Desk-scale room benchmark.

    Defaults are sized for a single CPU core: the point encoder stays at its
    seeded initialization and only the heads train (``train_encoder=False``),
    which cuts a step to about a quarter of the end-to-end cost.
    """

    n_train: int = 32
    n_test: int = 8
    density: int = 8
    n_on: int = 4000
    n_off: int = 20000
    steps: int = 1500
    batch_scenes: int = 4
    queries_per_scene: int = 1024
    n_classes: int = 3
    label_fraction: float = 1.0
    seed: int = 0
    n_dense: int = 100_000
    eval_gt_points: int = 100_000
    no_range_term: bool = False
    no_query_term: bool = False
    sem_with_q: bool = False
    K: int = 4
    uncertainty: bool = True
    train_encoder: bool = False


def toy_scenes(cfg: ToyConfig, split: str) -> list[SceneRecord]:
    """Procedural rooms; train and test use disjoint seed ranges."""
    base = 0 if split == "train" else 100_000
    n = cfg.n_train if split == "train" else cfg.n_test
    out = []
    for i in range(n):
        s = cfg.seed * 1_000_000 + base + i
        mesh = build_scene(random_room(s, n_objects=(2, 5), density=cfg.density))
        qc = QueryConfig(n_on=cfg.n_on, n_off=cfg.n_off, seed=s, class_count=cfg.n_classes)
        out.append(make_scene_record(mesh, qc, name=f"{split}-{i}"))
    return out


def train_toy(cfg: ToyConfig, train: list[SceneRecord], on_step=None) -> RangeUDFParams:
    tcfg = TrainConfig(batch_scenes=cfg.batch_scenes, queries_per_scene=cfg.queries_per_scene,
                       surface_points=cfg.n_on, K=cfg.K, seed=cfg.seed, n_classes=cfg.n_classes,
                       label_fraction=cfg.label_fraction, uncertainty=cfg.uncertainty,
                       no_range_term=cfg.no_range_term, no_query_term=cfg.no_query_term,
                       sem_with_q=cfg.sem_with_q, train_encoder=cfg.train_encoder,
                       epochs=10**9)
    ckpt = fit(train, tcfg, max_steps=cfg.steps,
               on_epoch=(lambda e, row: on_step(row)) if on_step else None)
    return ckpt.params


@dataclass
class SceneScore:
    name: str
    recon: ReconstructionReport
    miou: float
    oa: float


def evaluate_scene(params: RangeUDFParams, scene: SceneRecord, cfg: ToyConfig) -> SceneScore:
    """Dense extraction against a fresh ground-truth surface sample, plus labels."""
    from .geomcore import sample_surface

    fc = feature_cloud(scene.cloud, params.encoder, seed=cfg.seed)
    field_ = ModelField(fc, params, K=cfg.K)
    dense = extract_dense_points(field_, cfg.n_dense, seed=cfg.seed)
    gt = sample_surface(scene.mesh, cfg.eval_gt_points, seed=cfg.seed + 7)
    rep = reconstruction_report(dense.positions, gt.positions)
    pred = label_points(params, fc, gt.positions, K=cfg.K)
    seg = seg_metrics(pred, gt.labels, cfg.n_classes)
    return SceneScore(scene.name, rep, seg.miou, seg.oa)


def segmentation_score(params: RangeUDFParams, scenes: list[SceneRecord], cfg: ToyConfig) -> float:
    """Mean mIoU of labels predicted at held-out surface samples (no extraction)."""
    from .geomcore import sample_surface

    scores = []
    for sc in scenes:
        fc = feature_cloud(sc.cloud, params.encoder, seed=cfg.seed)
        gt = sample_surface(sc.mesh, cfg.eval_gt_points, seed=cfg.seed + 7)
        _, logits = predict(fc, gt.positions, params, cfg.K)
        scores.append(seg_metrics(logits.argmax(-1), gt.labels, cfg.n_classes).miou)
    return float(np.mean(scores))
