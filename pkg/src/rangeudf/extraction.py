"""Dense point clouds and meshes from an unsigned distance field."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from skimage import measure

from .errors import EmptyMeshError, ExtractionError, ValidationError
from .geomcore import TriangleMesh
from .model import RangeUDFParams, distance_and_gradient, predict, predict_distance
from .pointnet import FeatureCloud

GRAD_EPS = 1e-8
RESIDUAL_TOL = 0.005
MAX_ROUNDS = 50


class DistanceField(Protocol):
    def distance(self, Q: np.ndarray) -> np.ndarray: ...

    def gradient(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(d, grad d) at Q."""
        ...


# ---------------------------------------------------------------------------
# analytic fields used as oracles


@dataclass(frozen=True)
class SphereUDF:
    radius: float = 0.3
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def distance(self, Q):
        r = np.linalg.norm(np.asarray(Q, np.float64) - self.center, axis=-1)
        return np.abs(r - self.radius)

    def gradient(self, Q):
        x = np.asarray(Q, np.float64) - self.center
        r = np.linalg.norm(x, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        g = np.sign(r - self.radius)[:, None] * x / safe[:, None]
        g[r == 0] = 0.0
        return np.abs(r - self.radius), g


@dataclass(frozen=True)
class PlaneUDF:
    """d = |z - height|."""

    height: float = 0.0

    def distance(self, Q):
        return np.abs(np.asarray(Q, np.float64)[:, 2] - self.height)

    def gradient(self, Q):
        Q = np.asarray(Q, np.float64)
        g = np.zeros_like(Q)
        g[:, 2] = np.sign(Q[:, 2] - self.height)
        return self.distance(Q), g


@dataclass(frozen=True)
class ConstantField:
    value: float = 1.0

    def distance(self, Q):
        return np.full(len(Q), self.value)

    def gradient(self, Q):
        return self.distance(Q), np.zeros((len(Q), 3))


class ModelField:
    """The learned distance of a trained model over one scene.

    Gradients come from the tape; ``finite_difference=True`` switches to
    central differences with step ``h``.
    """

    def __init__(self, scene: FeatureCloud, params: RangeUDFParams, K: int | None = None,
                 finite_difference: bool = False, h: float = 1e-3):
        self.scene, self.params, self.K = scene, params, K
        self.finite_difference, self.h = finite_difference, h

    def distance(self, Q):
        return predict_distance(self.scene, Q, self.params, self.K).astype(np.float64)

    def gradient(self, Q):
        Q = np.asarray(Q, dtype=np.float32).reshape(-1, 3)
        if not self.finite_difference:
            d, g = distance_and_gradient(self.scene, Q, self.params, self.K)
            return d.astype(np.float64), g.astype(np.float64)
        d = self.distance(Q)
        g = np.zeros((len(Q), 3))
        for k in range(3):
            e = np.zeros(3, dtype=np.float32)
            e[k] = self.h
            g[:, k] = (self.distance(Q + e) - self.distance(Q - e)) / (2 * self.h)
        return d, g


# ---------------------------------------------------------------------------
# projection


def project(field: DistanceField, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One step q' = q - d(q) grad/|grad|, clamped to the cube.

    Returns (Q', ok); rows with a vanishing gradient away from the surface
    are flagged not ok and left where they were. Rows already at d = 0 stay
    put and count as ok.
    """
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    d, g = field.gradient(Q)
    n = np.linalg.norm(g, axis=-1)
    move = n > GRAD_EPS
    ok = move | (d == 0)
    step = np.zeros_like(Q)
    step[move] = (d[move] / n[move])[:, None] * g[move]
    return np.clip(Q - step, -0.5, 0.5), ok


def project_step(field: DistanceField, q) -> np.ndarray | None:
    """Single-point projection; ``None`` signals a vanishing gradient."""
    out, ok = project(field, np.asarray(q, dtype=np.float64).reshape(1, 3))
    return out[0] if ok[0] else None


@dataclass
class DensePoints:
    positions: np.ndarray  # (M, 3)
    residual: np.ndarray  # (M,) field value at each point
    labels: np.ndarray | None = None
    rounds: int = 0

    def __len__(self) -> int:
        return len(self.positions)


def _project_many(field, P, iters):
    keep = np.ones(len(P), dtype=bool)
    for _ in range(iters):
        P, ok = project(field, P)
        keep &= ok
    return P[keep]


def extract_dense_points(field: DistanceField, n_min: int, threshold: float = 0.1, iters: int = 5,
                         seed: int = 0, n_seed: int | None = None,
                         residual_tol: float = RESIDUAL_TOL, max_rounds: int = MAX_ROUNDS,
                         batch: int = 200_000) -> DensePoints:
    """Project random samples onto the zero set until ``n_min`` points converge.

    Seeds are uniform in the cube; those with d > threshold are dropped, the
    rest take ``iters`` projection steps. Survivors are re-noised with
    sigma = threshold / 3 and projected again, round after round, until at
    least ``n_min`` points have a residual below ``residual_tol``.
    """
    if n_min < 1:
        raise ValidationError("n_min must be >= 1")
    rng = np.random.default_rng([seed, 0xD3])
    sigma = threshold / 3.0
    accepted: list[np.ndarray] = []
    residuals: list[np.ndarray] = []
    n_acc = 0
    pool = np.zeros((0, 3))
    rounds = 0
    n_seed = n_seed or max(n_min, 10_000)
    while n_acc < n_min:
        if rounds >= max_rounds:
            raise ExtractionError(
                f"only {n_acc} of {n_min} points converged after {max_rounds} rounds", survivors=n_acc)
        rounds += 1
        need = n_min - n_acc
        if len(pool) == 0:
            cand = rng.uniform(-0.5, 0.5, size=(min(batch, max(n_seed, 2 * need)), 3))
        else:
            m = min(batch, max(2 * need, 1000))
            cand = pool[rng.integers(len(pool), size=m)] + rng.normal(size=(m, 3)) * sigma
            cand = np.clip(cand, -0.5, 0.5)
        cand = cand[field.distance(cand) <= threshold]
        if len(cand) == 0:
            continue
        cand = _project_many(field, cand, iters)
        if len(cand) == 0:
            continue
        d = field.distance(cand)
        near = d <= threshold
        pool = cand[near]
        good = d < residual_tol
        accepted.append(cand[good])
        residuals.append(d[good])
        n_acc += int(good.sum())
    return DensePoints(np.concatenate(accepted), np.concatenate(residuals), rounds=rounds)


# ---------------------------------------------------------------------------
# meshing


def evaluate_grid(field: DistanceField, resolution: int, chunk: int = 262_144) -> np.ndarray:
    t = np.linspace(-0.5, 0.5, resolution)
    gx, gy, gz = np.meshgrid(t, t, t, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = field.distance(pts[s:s + chunk])
    return out.reshape(resolution, resolution, resolution)


def extract_mesh(field: DistanceField, resolution: int = 128, level: float = 0.003) -> TriangleMesh:
    """Marching cubes on the thin shell d = level; a two-sided approximation of the surface."""
    if resolution < 8:
        raise ValidationError("resolution must be >= 8")
    vol = evaluate_grid(field, resolution)
    if not (vol.min() < level < vol.max()):
        raise EmptyMeshError(f"level {level} outside grid range [{vol.min():.4g}, {vol.max():.4g}]")
    spacing = 1.0 / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=level, spacing=(spacing,) * 3)
    if len(faces) == 0:
        raise EmptyMeshError("marching cubes produced no faces")
    return TriangleMesh(verts - 0.5, faces)


def label_points(params: RangeUDFParams, scene: FeatureCloud, pts: np.ndarray,
                 K: int | None = None) -> np.ndarray:
    """Argmax class of the semantic head at each point."""
    pts = np.asarray(pts, dtype=np.float32).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    _, logits = predict(scene, pts, params, K)
    return logits.argmax(axis=-1).astype(np.int64)
