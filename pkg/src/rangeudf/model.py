"""Range-aware unsigned distance function with a surface-oriented semantic head.

For a query q with K neighbors p_k carrying features F_k:

* range vector   R_k = MLP((q - p_k) ⊕ q ⊕ p_k)               (9 -> 32)
* interpolation  F_u = AttSets([R_k ⊕ F_k]_k)                  (K x 64 -> 32)
* distance       d_q = ReLU(MLP(F_u))                          (32 -> 512 -> 32 -> 32 -> 1)
* semantics      s_q = MLP(AttSets([p_k ⊕ F_k]_k))             (K x 35 -> 32 -> 64 -> 32 -> C)

The semantic branch never sees q.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import EmptySetError, ShapeError, ValidationError
from .pointnet import FEATURE_DIM, EncoderParams, FeatureCloud, KNNIndex

RANGE_DIM = 32
UDF_WIDTHS = (512, 32, 32, 1)
SEM_WIDTHS = (64, 32)
IDW_EPS = 1e-8
# the distance output starts positive so the final ReLU passes gradient
UDF_BIAS_INIT = 0.1


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 1
    K: int = 4
    range_term: bool = True  # (q - p_k) in the range encoding
    query_term: bool = True  # q in the range encoding
    sem_with_q: bool = False  # append q to the semantic input (ablation)
    interp: str = "range"  # "range" or "idw"

    def __post_init__(self):
        if self.n_classes < 1 or self.K < 1:
            raise ValidationError("n_classes and K must be >= 1")
        if self.interp not in ("range", "idw"):
            raise ValidationError(f"unknown interpolation {self.interp!r}")

    @property
    def range_in(self) -> int:
        return 3 * (1 + int(self.range_term) + int(self.query_term))

    @property
    def sem_in(self) -> int:
        return 3 + FEATURE_DIM + (3 if self.sem_with_q else 0)


@dataclass
class RangeUDFParams:
    config: ModelConfig
    encoder: EncoderParams
    range_mlp: tc.Dense
    udf_pool: tc.AttSet
    udf_proj: tc.Dense
    udf_head: list[tc.Dense]
    sem_pool: tc.AttSet
    sem_proj: tc.Dense
    sem_head: list[tc.Dense]
    s1: tc.Parameter = field(default=None)
    s2: tc.Parameter = field(default=None)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "RangeUDFParams":
        rng = np.random.default_rng(seed)
        enc = EncoderParams.init(rng)
        udf_in = RANGE_DIM + FEATURE_DIM
        udf_head, d = [], FEATURE_DIM
        for i, w in enumerate(UDF_WIDTHS):
            udf_head.append(tc.Dense.init(rng, d, w, f"udf_head{i}"))
            d = w
        udf_head[-1].b.data[:] = UDF_BIAS_INIT
        sem_head, d = [], FEATURE_DIM
        for i, w in enumerate(SEM_WIDTHS + (config.n_classes,)):
            sem_head.append(tc.Dense.init(rng, d, w, f"sem_head{i}"))
            d = w
        return cls(
            config=config,
            encoder=enc,
            range_mlp=tc.Dense.init(rng, config.range_in, RANGE_DIM, "range_mlp"),
            udf_pool=tc.AttSet.init(rng, udf_in, "udf_pool"),
            udf_proj=tc.Dense.init(rng, udf_in, FEATURE_DIM, "udf_proj"),
            udf_head=udf_head,
            sem_pool=tc.AttSet.init(rng, config.sem_in, "sem_pool"),
            sem_proj=tc.Dense.init(rng, config.sem_in, FEATURE_DIM, "sem_proj"),
            sem_head=sem_head,
            s1=tc.Parameter(0.0, name="s1"),
            s2=tc.Parameter(0.0, name="s2"),
        )

    def head_parameters(self) -> list[tc.Parameter]:
        out = self.range_mlp.parameters() + self.udf_pool.parameters() + self.udf_proj.parameters()
        for d in self.udf_head:
            out += d.parameters()
        out += self.sem_pool.parameters() + self.sem_proj.parameters()
        for d in self.sem_head:
            out += d.parameters()
        return out

    def parameters(self) -> list[tc.Parameter]:
        return self.encoder.parameters() + self.head_parameters() + [self.s1, self.s2]

    def named(self) -> dict[str, tc.Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValidationError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def dims(self) -> dict[str, tuple]:
        return {
            "range_mlp": self.range_mlp.shape,
            "udf_pool": self.udf_pool.dim,
            "udf_head": tuple(d.shape for d in self.udf_head),
            "sem_pool": self.sem_pool.dim,
            "sem_head": tuple(d.shape for d in self.sem_head),
        }


@dataclass
class NeighborBundle:
    q: np.ndarray  # (..., 3)
    positions: np.ndarray  # (..., K, 3)
    features: np.ndarray  # (..., K, 32)

    def __post_init__(self):
        if self.positions.shape[-2] == 0:
            raise EmptySetError("neighbor bundle with K = 0")
        if self.positions.shape[:-1] != self.features.shape[:-1]:
            raise ShapeError(f"positions {self.positions.shape} vs features {self.features.shape}")


# ---------------------------------------------------------------------------
# building blocks; q, positions and features may be Tensors or arrays


def _t(x) -> tc.Tensor:
    if isinstance(x, tc.Tensor):
        return x
    return tc.Tensor(np.asarray(x, dtype=np.float32))


def _expand_q(q: tc.Tensor, pk: tc.Tensor) -> tc.Tensor:
    qe = tc.reshape(q, q.shape[:-1] + (1, 3))
    return tc.broadcast_to(qe, pk.shape)


def encode_range(q, pk, params: RangeUDFParams) -> tc.Tensor:
    """R_k^q for every neighbor: (..., K, 32)."""
    q, pk = _t(q), _t(pk)
    qb = q if q.shape == pk.shape else _expand_q(q, pk)
    cfg = params.config
    parts = []
    if cfg.range_term:
        parts.append(tc.sub(qb, pk))
    if cfg.query_term:
        parts.append(qb)
    parts.append(pk)
    return tc.leaky_relu(params.range_mlp(tc.concat(parts, axis=-1)))


def interpolate_udf(bundle: NeighborBundle, params: RangeUDFParams, q=None) -> tc.Tensor:
    """F_u^q: (..., 32). Pass ``q`` as a Tensor to differentiate with respect to it."""
    q = _t(bundle.q if q is None else q)
    pk, Fk = _t(bundle.positions), _t(bundle.features)
    R = encode_range(q, pk, params)
    pooled = params.udf_pool(tc.concat([R, Fk], axis=-1))
    return tc.leaky_relu(params.udf_proj(pooled))


def idw_baseline_interpolate(bundle: NeighborBundle, params: RangeUDFParams | None = None,
                             q=None) -> tc.Tensor:
    """Inverse-distance weighted mean of neighbor features (the ambiguous baseline)."""
    q = _t(bundle.q if q is None else q)
    pk, Fk = _t(bundle.positions), _t(bundle.features)
    diff = tc.sub(_expand_q(q, pk), pk)
    dist = tc.sqrt(tc.sum_(tc.mul(diff, diff), axis=-1))
    w = tc.div(1.0, tc.add(dist, IDW_EPS))
    w = tc.div(w, tc.sum_(w, axis=-1, keepdims=True))
    w = tc.reshape(w, w.shape + (1,))
    return tc.sum_(tc.mul(Fk, w), axis=-2)


def regress_distance(Fu, params: RangeUDFParams) -> tc.Tensor:
    """Unsigned distance (...,) >= 0."""
    x = _t(Fu)
    if x.shape[-1] != FEATURE_DIM:
        raise ShapeError(f"distance head expects {FEATURE_DIM}-D input, got {x.shape}")
    *hidden, last = params.udf_head
    for layer in hidden:
        x = tc.leaky_relu(layer(x))
    d = tc.relu(last(x))
    return tc.reshape(d, d.shape[:-1])


def segment_semantics(bundle: NeighborBundle, params: RangeUDFParams) -> tc.Tensor:
    """Class logits (..., C) from the neighbor patch alone."""
    pk, Fk = _t(bundle.positions), _t(bundle.features)
    parts = [pk, Fk]
    if params.config.sem_with_q:
        parts.insert(0, _expand_q(_t(bundle.q), pk))
    pooled = params.sem_pool(tc.concat(parts, axis=-1))
    x = tc.leaky_relu(params.sem_proj(pooled))
    *hidden, last = params.sem_head
    for layer in hidden:
        x = tc.leaky_relu(layer(x))
    return last(x)


def udf_branch(bundle: NeighborBundle, params: RangeUDFParams, q=None) -> tc.Tensor:
    if params.config.interp == "idw":
        Fu = idw_baseline_interpolate(bundle, params, q)
    else:
        Fu = interpolate_udf(bundle, params, q)
    return regress_distance(Fu, params)


# ---------------------------------------------------------------------------
# whole-model evaluation


def gather_bundle(positions: np.ndarray, features, Q: np.ndarray, idx: np.ndarray) -> NeighborBundle:
    """Bundle for queries Q (M, 3) with neighbor rows idx (M, K).

    ``features`` may be a Tensor on the tape (training) or a plain array.
    """
    pk = positions[idx]
    if isinstance(features, tc.Tensor):
        Fk = tc.take_rows(features, idx)
    else:
        Fk = np.asarray(features)[idx]
    bundle = NeighborBundle.__new__(NeighborBundle)
    bundle.q, bundle.positions, bundle.features = Q, pk, Fk
    return bundle


def forward_batch(scene: FeatureCloud, Q: np.ndarray, params: RangeUDFParams,
                  K: int | None = None, idx: np.ndarray | None = None,
                  features=None, q_tensor: tc.Tensor | None = None) -> tuple[tc.Tensor, tc.Tensor]:
    """(distances (M,), logits (M, C)) for M queries."""
    K = K or params.config.K
    Q = np.asarray(Q, dtype=np.float32).reshape(-1, 3)
    if idx is None:
        idx = scene.knn_index().query(Q, K)
    feats = scene.features if features is None else features
    bundle = gather_bundle(scene.positions, feats, Q, idx)
    d = udf_branch(bundle, params, q_tensor)
    logits = segment_semantics(bundle, params)
    return d, logits


def forward(scene: FeatureCloud, q, params: RangeUDFParams, K: int | None = None) -> tuple[float, np.ndarray]:
    """Single-query convenience: (distance, logits)."""
    d, logits = forward_batch(scene, np.asarray(q).reshape(1, 3), params, K)
    return float(d.data[0]), logits.data[0]


def predict(scene: FeatureCloud, Q: np.ndarray, params: RangeUDFParams, K: int | None = None,
            chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Chunked inference without a tape."""
    Q = np.asarray(Q, dtype=np.float32).reshape(-1, 3)
    C = params.config.n_classes
    d_out = np.empty(len(Q), dtype=np.float32)
    l_out = np.empty((len(Q), C), dtype=np.float32)
    for s in range(0, len(Q), chunk):
        d, logits = forward_batch(scene, Q[s:s + chunk], params, K)
        d_out[s:s + chunk] = d.data
        l_out[s:s + chunk] = logits.data
    return d_out, l_out


def predict_distance(scene: FeatureCloud, Q: np.ndarray, params: RangeUDFParams,
                     K: int | None = None, chunk: int = 65536) -> np.ndarray:
    """Distance branch only, without a tape."""
    Q = np.asarray(Q, dtype=np.float32).reshape(-1, 3)
    K = K or params.config.K
    out = np.empty(len(Q), dtype=np.float32)
    index = scene.knn_index()
    for s in range(0, len(Q), chunk):
        Qc = Q[s:s + chunk]
        bundle = gather_bundle(scene.positions, scene.features, Qc, index.query(Qc, K))
        out[s:s + chunk] = udf_branch(bundle, params).data
    return out


def distance_and_gradient(scene: FeatureCloud, Q: np.ndarray, params: RangeUDFParams,
                          K: int | None = None, chunk: int = 32768) -> tuple[np.ndarray, np.ndarray]:
    """Predicted distance and its gradient with respect to the query position.

    Neighbor sets are held fixed at each query (they are piecewise constant
    in q), so the gradient is taken through the range encoding.
    """
    Q = np.asarray(Q, dtype=np.float32).reshape(-1, 3)
    K = K or params.config.K
    d_out = np.empty(len(Q), dtype=np.float32)
    g_out = np.empty((len(Q), 3), dtype=np.float32)
    index = scene.knn_index()
    for s in range(0, len(Q), chunk):
        Qc = Q[s:s + chunk]
        idx = index.query(Qc, K)
        qt = tc.Tensor(Qc, requires_grad=True)
        bundle = gather_bundle(scene.positions, scene.features, Qc, idx)
        with tc.Tape() as tape:
            d = udf_branch(bundle, params, qt)
        tape.backward(d, seed=np.ones_like(d.data))
        d_out[s:s + chunk] = d.data
        g_out[s:s + chunk] = 0.0 if qt.grad is None else qt.grad
    return d_out, g_out


def copy_params(params: RangeUDFParams) -> RangeUDFParams:
    return copy.deepcopy(params)
