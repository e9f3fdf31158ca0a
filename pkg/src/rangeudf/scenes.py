"""Procedural labeled scenes built from primitive meshes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import QuerySet, SampleBlock, SceneRecord
from .errors import ValidationError
from .geomcore import TriangleMesh, normalize_unit_cube
from .pointnet import KNNIndex

KINDS = ("box", "sphere", "cylinder", "plane")


@dataclass
class Primitive:
    kind: str
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)  # half-extents; sphere uses scale[0] as radius
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        self.kind = str(self.kind)
        self.center = tuple(float(v) for v in self.center)
        self.scale = tuple(float(v) for v in self.scale)
        self.yaw, self.class_id = float(self.yaw), int(self.class_id)
        if self.kind not in KINDS:
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        if self.class_id < 0:
            raise ValidationError("class_id must be >= 0")


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    seed: int = 0
    density: int = 8

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]

    @property
    def n_classes(self) -> int:
        return 1 + max(p.class_id for p in self.primitives) if self.primitives else 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        unknown = set(d) - {"primitives", "seed", "density"}
        if unknown:
            raise ValidationError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# tessellation, all in local coordinates before pose


def _grid_quads(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(n+1)^2 vertices on [-1,1]^2 and 2 n^2 triangles."""
    t = np.linspace(-1.0, 1.0, n + 1)
    u, v = np.meshgrid(t, t, indexing="ij")
    verts = np.stack([u.ravel(), v.ravel()], axis=1)
    ids = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = ids[:-1, :-1].ravel(), ids[1:, :-1].ravel()
    c, d = ids[1:, 1:].ravel(), ids[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return verts, faces


def _cube_surface(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Six n x n subdivided faces of [-1,1]^3 (vertices duplicated along seams)."""
    uv, f = _grid_quads(n)
    V, F = [], []
    one = np.ones(len(uv))
    for axis in range(3):
        for sign in (-1.0, 1.0):
            cols = [None, None, None]
            others = [k for k in range(3) if k != axis]
            cols[axis] = sign * one
            cols[others[0]], cols[others[1]] = uv[:, 0], uv[:, 1]
            faces = f if sign > 0 else f[:, ::-1]
            F.append(faces + sum(len(v) for v in V))
            V.append(np.stack(cols, axis=1))
    return np.concatenate(V), np.concatenate(F)


def tessellate(kind: str, density: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(1, int(density))
    if kind == "box":
        return _cube_surface(n)
    if kind == "sphere":
        V, F = _cube_surface(n)
        return V / np.linalg.norm(V, axis=1, keepdims=True), F
    if kind == "plane":
        uv, F = _grid_quads(n)
        return np.column_stack([uv, np.zeros(len(uv))]), F
    # cylinder: radius 1, z in [-1, 1], capped
    m = 4 * n
    th = np.linspace(0.0, 2 * np.pi, m, endpoint=False)
    zs = np.linspace(-1.0, 1.0, n + 1)
    ring = np.stack([np.cos(th), np.sin(th)], axis=1)
    side = np.concatenate([np.column_stack([ring, np.full(m, z)]) for z in zs])
    F = []
    for r in range(n):
        for j in range(m):
            a, b = r * m + j, r * m + (j + 1) % m
            c, d = a + m, b + m
            F += [(a, b, d), (a, d, c)]
    base = len(side)
    caps = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    V = np.concatenate([side, caps])
    top = n * m
    for j in range(m):
        F.append((base, (j + 1) % m, j))
        F.append((base + 1, top + j, top + (j + 1) % m))
    return V, np.array(F, dtype=np.int64)


def _pose(V: np.ndarray, p: Primitive) -> np.ndarray:
    s = np.array(p.scale, dtype=np.float64)
    if p.kind == "sphere":
        s = np.full(3, s[0])
    c, sn = np.cos(p.yaw), np.sin(p.yaw)
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    return (V * s) @ R.T + np.asarray(p.center, dtype=np.float64)


def build_scene(spec: SceneSpec, normalize: bool = True) -> TriangleMesh:
    """Union of the tessellated primitives, faces labeled by primitive class."""
    if not spec.primitives:
        raise ValidationError("scene spec has no primitives")
    classes = sorted({p.class_id for p in spec.primitives})
    if classes != list(range(len(classes))):
        raise ValidationError(f"class ids must be contiguous from 0, got {classes}")
    Vs, Fs, Ls = [], [], []
    offset = 0
    for p in spec.primitives:
        V, F = tessellate(p.kind, spec.density)
        Vs.append(_pose(V, p))
        Fs.append(F + offset)
        Ls.append(np.full(len(F), p.class_id))
        offset += len(V)
    mesh = TriangleMesh(np.concatenate(Vs), np.concatenate(Fs), np.concatenate(Ls))
    if normalize:
        mesh, _ = normalize_unit_cube(mesh)
    return mesh


def random_room(seed: int, n_objects: tuple[int, int] = (2, 5), density: int = 8) -> SceneSpec:
    """A floor (class 0) plus boxes (class 1) and round objects (class 2).

    Total primitive count lies in [1 + n_objects[0], 1 + n_objects[1]].
    Objects rest on the floor and do not overlap in plan view.
    """
    rng = np.random.default_rng([seed, 0x5CE])
    prims = [Primitive("plane", (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0, 0)]
    k = int(rng.integers(n_objects[0], n_objects[1] + 1))
    placed: list[tuple[float, float, float]] = []
    kinds = ["box", "sphere", "cylinder"]
    # at least one of each object class when there is room for it
    chosen = ["box", rng.choice(["sphere", "cylinder"])] + list(rng.choice(kinds, size=max(0, k - 2)))
    for kind in chosen[:k]:
        for _ in range(100):
            r = float(rng.uniform(0.15, 0.3))
            x, y = rng.uniform(-0.95 + r, 0.95 - r, size=2)
            if all(np.hypot(x - px, y - py) > r + pr + 0.05 for px, py, pr in placed):
                break
        placed.append((x, y, r))
        if kind == "box":
            h = float(rng.uniform(0.1, 0.35))
            hx = r / np.sqrt(2)
            hy = float(rng.uniform(0.5, 1.0)) * hx
            prims.append(Primitive("box", (x, y, h), (hx, hy, h), float(rng.uniform(0, np.pi)), 1))
        elif kind == "sphere":
            prims.append(Primitive("sphere", (x, y, r), (r, r, r), 0.0, 2))
        else:
            h = float(rng.uniform(0.1, 0.35))
            prims.append(Primitive("cylinder", (x, y, h), (r * 0.8, r * 0.8, h), 0.0, 2))
    return SceneSpec(prims, seed=seed, density=density)


def write_scene(mesh: TriangleMesh, path: str | Path) -> None:
    """Labeled PLY plus a ``.labels`` sidecar."""
    from .geomcore import labels_path, write_labels, write_ply

    write_ply(path, mesh.vertices, mesh.faces, face_labels=mesh.face_labels)
    if mesh.face_labels is not None:
        write_labels(labels_path(path), mesh.face_labels)


# ---------------------------------------------------------------------------
# the paired ambiguity construction


@dataclass
class AmbiguityPair:
    first: SceneRecord
    second: SceneRecord
    queries: np.ndarray  # (M, 3) footprint queries of the first record
    neighbors: np.ndarray  # (M, K) shared neighbor rows
    offset: float = 0.0
    meta: dict = field(default_factory=dict)


def make_ambiguity_pair(offset: float, n_queries: int = 512, grid: int = 48, K: int = 4,
                        seed: int = 0, heights: tuple[float, float] = (0.005, 0.045)) -> AmbiguityPair:
    """Two records with bit-identical neighbor bundles but targets that differ by ``offset``.

    Both records share one cloud: a regular grid on the patch z = 0. The first
    record's queries sit at heights h over the patch interior (udf = h); the
    second record holds the same queries lifted by ``offset`` along the normal
    (udf = h + offset). Lifting along the normal keeps every squared distance
    ordering (h^2 + r^2 is monotone in r), so each pair gathers the same K
    neighbor rows. Anything that looks only at the neighbors must answer both
    targets with one value.
    """
    if not 0.0 <= offset < 0.2:
        raise ValidationError("offset must lie in [0, 0.2)")
    rng = np.random.default_rng([seed, 0xA3B])
    t = np.linspace(-0.45, 0.45, grid)
    gx, gy = np.meshgrid(t, t, indexing="ij")
    cloud = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]).astype(np.float32)
    mesh = TriangleMesh(
        np.array([[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]]),
        np.array([[0, 1, 2], [0, 2, 3]]),
        np.zeros(2, dtype=np.int64),
    )
    index = KNNIndex(cloud)
    q1 = np.zeros((0, 3), dtype=np.float32)
    q2, nb = q1.copy(), np.zeros((0, K), dtype=np.int64)
    while len(q1) < n_queries:
        m = 2 * (n_queries - len(q1))
        xy = rng.uniform(-0.3, 0.3, size=(m, 2))
        h = rng.uniform(heights[0], heights[1], size=m)
        a = np.column_stack([xy, h]).astype(np.float32)
        b = a.copy()
        b[:, 2] = (a[:, 2].astype(np.float64) + offset).astype(np.float32)
        na, nbb = index.query(a, K), index.query(b, K)
        # drop the rare footprint whose near-tie resolves differently in floating point
        ok = (na == nbb).all(axis=1)
        q1, q2, nb = np.concatenate([q1, a[ok]]), np.concatenate([q2, b[ok]]), np.concatenate([nb, na[ok]])
    q1, q2, nb = q1[:n_queries], q2[:n_queries], nb[:n_queries]
    zeros = np.zeros(len(q1), dtype=np.uint32)
    empty = SampleBlock.empty()
    qs1 = QuerySet(empty, SampleBlock(q1, q1[:, 2], zeros), 1, "ambiguity-a", seed)
    qs2 = QuerySet(empty, SampleBlock(q2, q2[:, 2], zeros), 1, "ambiguity-b", seed)
    first = SceneRecord(cloud, qs1, np.zeros(len(cloud), dtype=np.int64), mesh, "ambiguity-a")
    second = SceneRecord(cloud.copy(), qs2, np.zeros(len(cloud), dtype=np.int64), mesh, "ambiguity-b")
    return AmbiguityPair(first, second, q1, nb, offset)
