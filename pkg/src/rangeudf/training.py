"""Multi-task loss, training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .dataset import SceneRecord
from .errors import FormatError, ShapeError, TruncatedFileError, ValidationError
from .model import (ModelConfig, NeighborBundle, RangeUDFParams, gather_bundle,
                    segment_semantics, udf_branch)
from .pointnet import KNNIndex, build_structure, extract_features

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RUCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_scenes: int = 4
    queries_per_scene: int = 50_000
    surface_points: int = 10_000
    K: int = 4
    lr: float = 1e-3
    warmup_steps: int = 200  # linear ramp of the learning rate from lr / warmup_steps
    epochs: int = 1
    clamp: float | None = 0.1
    seed: int = 0
    n_classes: int = 1
    uncertainty: bool = True
    label_fraction: float = 1.0
    train_encoder: bool = True
    # ablations
    no_range_term: bool = False
    no_query_term: bool = False
    sem_with_q: bool = False
    interp: str = "range"

    def __post_init__(self):
        for name in ("batch_scenes", "queries_per_scene", "surface_points", "K", "n_classes"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.warmup_steps < 0:
            raise ValidationError("warmup_steps must be >= 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.clamp is not None and not self.clamp > 0:
            raise ValidationError("clamp must be > 0 when enabled")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValidationError("label_fraction must lie in [0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_classes=self.n_classes,
            K=self.K,
            range_term=not self.no_range_term,
            query_term=not self.no_query_term,
            sem_with_q=self.sem_with_q,
            interp=self.interp,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def combined_loss(d_pred: tc.Tensor, d_gt, logits: tc.Tensor, labels, s1: tc.Tensor,
                  s2: tc.Tensor, clamp: float | None = 0.1, label_mask=None,
                  uncertainty: bool = True) -> tuple[tc.Tensor, tc.Tensor, tc.Tensor]:
    """(total, l1, ce) with total = e^-s1 L1 + s1 + e^-s2 CE + s2.

    CE averages over labeled queries only (``label_mask``); with no labeled
    query the semantic term, including s2, drops out. ``uncertainty=False``
    gives the plain sum L1 + CE.
    """
    d_gt = np.asarray(d_gt, dtype=d_pred.data.dtype)
    if d_pred.shape != d_gt.shape:
        raise ShapeError(f"d_pred {d_pred.shape} vs d_gt {d_gt.shape}")
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape or labels.shape != d_gt.shape:
        raise ShapeError(f"logits {logits.shape}, labels {labels.shape}, d {d_gt.shape}")
    if clamp is not None:
        l1 = tc.l1_loss(tc.minimum(d_pred, clamp), np.minimum(d_gt, clamp))
    else:
        l1 = tc.l1_loss(d_pred, d_gt)
    mask = np.ones(labels.shape, dtype=bool) if label_mask is None else np.asarray(label_mask, dtype=bool)
    has_labels = bool(mask.any())
    if has_labels:
        ce = tc.weighted_mean(tc.softmax_cross_entropy(logits, labels), mask.astype(np.float32))
    else:
        ce = tc.Tensor(np.zeros((), dtype=d_pred.data.dtype))
    if not uncertainty:
        return (tc.add(l1, ce) if has_labels else l1), l1, ce
    total = tc.add(tc.mul(tc.exp(tc.mul(s1, -1.0)), l1), s1)
    if has_labels:
        total = tc.add(total, tc.add(tc.mul(tc.exp(tc.mul(s2, -1.0)), ce), s2))
    return total, l1, ce


# ---------------------------------------------------------------------------
# training


@dataclass
class StepStats:
    total: float
    l1: float
    ce: float
    s1: float
    s2: float


def _scene_cache(scene: SceneRecord, cfg: TrainConfig) -> dict:
    key = ("train", cfg.K, cfg.seed, cfg.label_fraction)
    c = scene.cache.get(key)
    if c is None:
        samples = scene.queries.all_samples()
        structure = build_structure(scene.cloud, seed=cfg.seed)
        idx = KNNIndex(scene.cloud).query(samples.positions, cfg.K)
        c = {
            "structure": structure,
            "positions": samples.positions,
            "udf": samples.udf,
            "labels": samples.labels.astype(np.int64),
            "mask": scene.queries.label_mask(cfg.label_fraction),
            "idx": idx,
        }
        scene.cache[key] = c
    return c


def trainable(params: RangeUDFParams, cfg: TrainConfig) -> list[tc.Parameter]:
    ps = params.head_parameters()
    if cfg.train_encoder:
        ps = params.encoder.parameters() + ps
    if cfg.uncertainty:
        ps = ps + [params.s1, params.s2]
    return ps


def batch_loss(scenes: Sequence[SceneRecord], params: RangeUDFParams, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[tc.Tensor, tc.Tensor, tc.Tensor]:
    """Loss over a random subset of each scene's queries (recorded on the active tape)."""
    pk_all, fk_all, q_all, d_all, lab_all, mask_all = [], [], [], [], [], []
    for scene in scenes:
        c = _scene_cache(scene, cfg)
        n = len(c["udf"])
        m = min(cfg.queries_per_scene, n)
        pick = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
        if cfg.train_encoder:
            feats = extract_features(scene.cloud, params.encoder, structure=c["structure"])
        else:
            feats = c.get("frozen_features")
            if feats is None:
                feats = c["frozen_features"] = extract_features(
                    scene.cloud, params.encoder, structure=c["structure"]).data
        idx = c["idx"][pick]
        b = gather_bundle(scene.cloud, feats, c["positions"][pick], idx)
        pk_all.append(b.positions)
        fk_all.append(b.features if isinstance(b.features, tc.Tensor) else tc.Tensor(b.features))
        q_all.append(b.q)
        d_all.append(c["udf"][pick])
        lab_all.append(c["labels"][pick])
        mask_all.append(c["mask"][pick])
    bundle = NeighborBundle.__new__(NeighborBundle)
    bundle.q = np.concatenate(q_all)
    bundle.positions = np.concatenate(pk_all)
    bundle.features = fk_all[0] if len(fk_all) == 1 else tc.concat(fk_all, axis=0)
    d = udf_branch(bundle, params)
    logits = segment_semantics(bundle, params)
    return combined_loss(
        d, np.concatenate(d_all), logits, np.concatenate(lab_all), params.s1, params.s2,
        clamp=cfg.clamp, label_mask=np.concatenate(mask_all), uncertainty=cfg.uncertainty,
    )


def train_step(scenes: Sequence[SceneRecord], params: RangeUDFParams, opt_state: tc.AdamState,
               cfg: TrainConfig, rng: np.random.Generator) -> StepStats:
    """One forward/backward/ADAM update; mutates params and opt_state in place."""
    ps = trainable(params, cfg)
    tc.zero_grads(ps)
    with tc.Tape() as tape:
        total, l1, ce = batch_loss(scenes, params, cfg, rng)
    tape.backward(total)
    tc.adam_step(ps, None, opt_state, lr=learning_rate(cfg, opt_state.t))
    return StepStats(total.item(), l1.item(), ce.item(), params.s1.item(), params.s2.item())


def learning_rate(cfg: TrainConfig, t: int) -> float:
    """Rate for the update after ``t`` completed steps."""
    if cfg.warmup_steps and t < cfg.warmup_steps:
        return cfg.lr * (t + 1) / cfg.warmup_steps
    return cfg.lr


@dataclass
class Checkpoint:
    params: RangeUDFParams
    opt_state: tc.AdamState
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def fit(dataset: Sequence[SceneRecord], cfg: TrainConfig, params: RangeUDFParams | None = None,
        checkpoint_path: str | Path | None = None, checkpoint_every: int = 0,
        on_epoch: Callable[[int, dict], None] | None = None,
        max_steps: int | None = None) -> Checkpoint:
    """Train for ``cfg.epochs`` passes over the scenes (batches of ``batch_scenes``)."""
    if not dataset:
        raise ValidationError("fit needs at least one scene")
    params = params or RangeUDFParams.init(cfg.model_config(), seed=cfg.seed)
    opt = tc.AdamState()
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    history: list[dict] = []
    step = 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        n = 0
        for s in range(0, len(order), cfg.batch_scenes):
            batch = [dataset[i] for i in order[s:s + cfg.batch_scenes]]
            st = train_step(batch, params, opt, cfg, rng)
            step += 1
            sums += (st.total, st.l1, st.ce)
            n += 1
            if max_steps is not None and step >= max_steps:
                break
        row = {"epoch": epoch, "step": step, "total": sums[0] / n, "l1": sums[1] / n,
               "ce": sums[2] / n, "s1": params.s1.item(), "s2": params.s2.item()}
        history.append(row)
        if on_epoch:
            on_epoch(epoch, row)
        if checkpoint_path and checkpoint_every and epoch % checkpoint_every == 0:
            save_checkpoint(Checkpoint(params, opt, cfg, epoch, step, rng.bit_generator.state, history),
                            checkpoint_path)
        if max_steps is not None and step >= max_steps:
            break
    ckpt = Checkpoint(params, opt, cfg, epoch if cfg.epochs else 0, step, rng.bit_generator.state, history)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


# ---------------------------------------------------------------------------
# checkpoint file: magic, u32 version, u32 header length, JSON header, raw f32 tensors


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    named = ckpt.params.named()
    arrays: list[tuple[str, np.ndarray]] = [(k, p.data) for k, p in named.items()]
    for k in named:
        if k in ckpt.opt_state.m:
            arrays.append((f"adam.m/{k}", ckpt.opt_state.m[k]))
            arrays.append((f"adam.v/{k}", ckpt.opt_state.v[k]))
    header = {
        "tensors": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
        "model_config": asdict(ckpt.params.config),
        "train_config": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "adam_t": ckpt.opt_state.t,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, header needs 12")
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: byte 0: bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(blob) < 12 + hlen:
        raise TruncatedFileError(f"{path}: header cut short")
    try:
        header = json.loads(blob[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: byte 12: unreadable header ({e})") from None
    off = 12 + hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + 4 * n > len(blob):
            raise TruncatedFileError(f"{path}: tensor {t['name']} cut short at byte {off}")
        tensors[t["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(t["shape"]).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise FormatError(f"{path}: byte {off}: {len(blob) - off} unexpected trailing bytes")

    mcfg = ModelConfig(**header["model_config"])
    tcfg = TrainConfig.from_dict(header["train_config"])
    params = RangeUDFParams.init(mcfg)
    for name, p in params.named().items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise FormatError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name]
        p.grad = np.zeros_like(p.data)
    opt = tc.AdamState(t=int(header["adam_t"]))
    for name in params.named():
        if f"adam.m/{name}" in tensors:
            opt.m[name] = tensors[f"adam.m/{name}"]
            opt.v[name] = tensors[f"adam.v/{name}"]
    return Checkpoint(params, opt, tcfg, header["epoch"], header["step"], header["rng_state"], header["history"])


def loss_floor(d1: np.ndarray, d2: np.ndarray) -> float:
    """Best mean l1 any single prediction per pair can reach: mean |d1 - d2| / 2."""
    return float(np.mean(np.abs(np.asarray(d1, np.float64) - np.asarray(d2, np.float64))) / 2.0)
