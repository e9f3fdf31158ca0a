"""kNN neighborhoods and the per-point feature extractor.

The extractor is a small 4-level encoder-decoder in the RandLA-Net spirit:
each level aggregates 8 nearest neighbors with a relative-position encoding,
a shared MLP and attention pooling, then keeps a random quarter of the
points. The decoder copies features back along nearest neighbors, fuses the
skip connection and finally projects to 32 channels per input point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensorcore as tc
from .errors import ValidationError

ENC_WIDTHS = (32, 64, 128, 256)
FEATURE_DIM = 32
ENC_NEIGHBORS = 8
DOWNSAMPLE = 4
MIN_POINTS = DOWNSAMPLE ** (len(ENC_WIDTHS) - 1)  # 64: one point left at the last level
_TIE_MARGIN = 4


class KNNIndex:
    """kd-tree over a point cloud with deterministic ordering.

    Results are sorted by exact float64 distance, ties broken by lower index.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if not len(self.points):
            raise ValidationError("kNN over an empty cloud")
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, Q: np.ndarray, K: int) -> np.ndarray:
        """(M, K) neighbor indices for M queries."""
        N = len(self.points)
        if K < 1 or K > N:
            raise ValidationError(f"K={K} outside [1, {N}]")
        Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
        if not len(Q):
            return np.zeros((0, K), dtype=np.int64)
        kq = min(N, K + _TIE_MARGIN)
        _, cand = self.tree.query(Q, k=kq)
        cand = cand.reshape(len(Q), kq)
        d2 = ((self.points[cand] - Q[:, None, :]) ** 2).sum(axis=-1)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=-1)
        d2 = np.take_along_axis(d2, order, axis=-1)
        out = cand[:, :K].copy()
        if kq < N:
            # the candidate window may cut through a run of ties (or near ties
            # the tree ordered differently): redo those rows exhaustively
            redo = np.flatnonzero(d2[:, -1] <= d2[:, K - 1] * (1 + 1e-12) + 1e-300)
            for i in redo:
                out[i] = self._brute_row(Q[i], K)
        return out.astype(np.int64)

    def _brute_row(self, q: np.ndarray, K: int) -> np.ndarray:
        d2 = ((self.points - q) ** 2).sum(axis=-1)
        return np.lexsort((np.arange(len(d2)), d2))[:K]


def knn(cloud: np.ndarray, q, K: int) -> np.ndarray:
    """Indices of the K nearest cloud points to a single query, nearest first."""
    return KNNIndex(cloud).query(np.asarray(q).reshape(1, 3), K)[0]


# ---------------------------------------------------------------------------
# encoder-decoder


@dataclass
class EncoderParams:
    enc_mlp: list[tc.Dense]  # (10 + D_in) -> width_l
    enc_pool: list[tc.AttSet]
    dec: list[tc.Dense]  # bottleneck, then 3 skip fusions
    head: tc.Dense  # 32 -> 32

    @classmethod
    def init(cls, rng: np.random.Generator, widths=ENC_WIDTHS, out_dim: int = FEATURE_DIM) -> "EncoderParams":
        enc_mlp, enc_pool = [], []
        d_in = 3
        for l, w in enumerate(widths):
            enc_mlp.append(tc.Dense.init(rng, 10 + d_in, w, f"enc{l}.mlp"))
            enc_pool.append(tc.AttSet.init(rng, w, f"enc{l}.pool"))
            d_in = w
        dec = [tc.Dense.init(rng, widths[-1], widths[-1], "dec3")]
        d = widths[-1]
        for l in range(len(widths) - 2, -1, -1):
            dec.append(tc.Dense.init(rng, d + widths[l], widths[l], f"dec{l}"))
            d = widths[l]
        head = tc.Dense.init(rng, widths[0], out_dim, "enc_head")
        return cls(enc_mlp, enc_pool, dec, head)

    def parameters(self) -> list[tc.Parameter]:
        out = []
        for m, p in zip(self.enc_mlp, self.enc_pool):
            out += m.parameters() + p.parameters()
        for d in self.dec:
            out += d.parameters()
        return out + self.head.parameters()

    def plan(self) -> dict:
        """Channel widths per stage, for structural checks."""
        return {
            "encoder": [m.shape[1] for m in self.enc_mlp],
            "decoder": [d.shape[1] for d in self.dec],
            "out": self.head.shape[1],
        }


@dataclass
class CloudStructure:
    """Geometry-only precomputation for one cloud: subsets, neighbors, encodings."""

    positions: list[np.ndarray]  # per level, (N_l, 3) f32
    neighbors: list[np.ndarray]  # per level, (N_l, k_l)
    relpos: list[np.ndarray]  # per level, (N_l, k_l, 10) f32
    subsets: list[np.ndarray]  # level l -> l+1 row selection
    upsample: list[np.ndarray]  # for level l < L-1: nearest row of level l+1


def build_structure(cloud: np.ndarray, seed: int = 0, levels: int = len(ENC_WIDTHS),
                    k: int = ENC_NEIGHBORS) -> CloudStructure:
    P = np.asarray(cloud, dtype=np.float32).reshape(-1, 3)
    if len(P) < DOWNSAMPLE ** (levels - 1):
        raise ValidationError(f"need at least {DOWNSAMPLE ** (levels - 1)} points, got {len(P)}")
    if not np.isfinite(P).all():
        raise ValidationError("cloud has non-finite coordinates")
    rng = np.random.default_rng([seed, 0xE7C])
    positions, neighbors, relpos, subsets, upsample = [], [], [], [], []
    for l in range(levels):
        idx = KNNIndex(P)
        kl = min(k, len(P))
        nb = idx.query(P, kl)
        pi = np.broadcast_to(P[:, None, :], (len(P), kl, 3))
        pj = P[nb]
        diff = pi - pj
        dist = np.linalg.norm(diff, axis=-1, keepdims=True)
        positions.append(P)
        neighbors.append(nb)
        relpos.append(np.concatenate([pi, pj, diff, dist], axis=-1).astype(np.float32))
        if l + 1 < levels:
            keep = np.sort(rng.choice(len(P), size=max(1, len(P) // DOWNSAMPLE), replace=False))
            subsets.append(keep)
            nxt = P[keep]
            upsample.append(KNNIndex(nxt).query(P, 1)[:, 0])
            P = nxt
    return CloudStructure(positions, neighbors, relpos, subsets, upsample)


def extract_features(cloud: np.ndarray, params: EncoderParams, seed: int = 0,
                     structure: CloudStructure | None = None) -> tc.Tensor:
    """(N, 32) per-point features; recorded on the active tape if any."""
    s = structure or build_structure(cloud, seed, levels=len(params.enc_mlp))
    feats = tc.Tensor(s.positions[0])
    skips = []
    for l, (mlp, pool) in enumerate(zip(params.enc_mlp, params.enc_pool)):
        if l > 0:
            feats = tc.take_rows(feats, s.subsets[l - 1])
        gathered = tc.take_rows(feats, s.neighbors[l])
        X = tc.concat([tc.Tensor(s.relpos[l]), gathered], axis=-1)
        feats = pool(tc.leaky_relu(mlp(X)))
        skips.append(feats)
    x = tc.leaky_relu(params.dec[0](skips[-1]))
    for j, l in enumerate(range(len(skips) - 2, -1, -1)):
        up = tc.take_rows(x, s.upsample[l])
        x = tc.leaky_relu(params.dec[j + 1](tc.concat([up, skips[l]], axis=-1)))
    return params.head(x)


@dataclass
class FeatureCloud:
    positions: np.ndarray  # (N, 3) f32
    features: np.ndarray  # (N, 32) f32
    index: KNNIndex | None = None

    def knn_index(self) -> KNNIndex:
        if self.index is None:
            self.index = KNNIndex(self.positions)
        return self.index


def feature_cloud(cloud: np.ndarray, params: EncoderParams, seed: int = 0) -> FeatureCloud:
    """Inference-only convenience: features as a plain array next to positions."""
    feats = extract_features(cloud, params, seed)
    pos = np.asarray(cloud, dtype=np.float32).reshape(-1, 3)
    return FeatureCloud(pos, feats.data.astype(np.float32))
