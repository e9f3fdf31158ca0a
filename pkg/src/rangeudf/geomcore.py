"""Triangle meshes: IO, unit-cube normalization, exact closest points and a BVH."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import DegenerateGeometryError, FormatError, ValidationError

# TBB in this image is too old for numba; the portable pool avoids the warning
numba.config.THREADING_LAYER = "workqueue"

REGION_VERTEX, REGION_EDGE, REGION_INTERIOR = 0, 1, 2
REGION_NAMES = {REGION_VERTEX: "vertex", REGION_EDGE: "edge", REGION_INTERIOR: "interior"}
TIE_TOL = 1e-9
LEAF_SIZE = 8


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    face_labels: np.ndarray | None = None  # (F,) int64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError(
                f"face index out of range: vertex count {len(v)}, index range [{f.min()}, {f.max()}]"
            )
        if self.face_labels is not None:
            lab = np.ascontiguousarray(self.face_labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(f):
                raise ValidationError(f"{len(lab)} face labels for {len(f)} faces")
            if lab.size and lab.min() < 0:
                raise ValidationError("negative face label")
            object.__setattr__(self, "face_labels", lab)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def class_count(self) -> int:
        if self.face_labels is None or not self.face_labels.size:
            return 1
        return int(self.face_labels.max()) + 1

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def labels_or_zero(self) -> np.ndarray:
        if self.face_labels is None:
            return np.zeros(self.n_faces, dtype=np.int64)
        return self.face_labels


@dataclass(frozen=True)
class Transform:
    """x_normalized = scale * x + translation."""

    scale: float
    translation: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(x, dtype=np.float64) + self.translation

    def invert(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.translation) / self.scale


def normalize_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, Transform]:
    """Center on the bounding box and scale uniformly so the longest side is 1."""
    v = mesh.vertices
    if len(v) == 0:
        raise ValidationError("cannot normalize a mesh without vertices")
    lo, hi = v.min(axis=0), v.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise DegenerateGeometryError("mesh has zero extent on every axis")
    s = 1.0 / extent
    t = -s * (lo + hi) / 2.0
    out = s * v + t
    # kill rounding spill so the [-0.5, 0.5] invariant holds exactly
    np.clip(out, -0.5, 0.5, out=out)
    return TriangleMesh(out, mesh.faces, mesh.face_labels), Transform(s, t)


# ---------------------------------------------------------------------------
# closest point on a triangle


@numba.njit(cache=True)
def _closest_on_segment(p, a, b):
    ab = b - a
    denom = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2]
    if denom <= 0.0:
        return a.copy(), 0.0
    t = ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1] + (p[2] - a[2]) * ab[2]) / denom
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    return a + t * ab, t


@numba.njit(cache=True)
def _dist2(x, y):
    d0, d1, d2 = x[0] - y[0], x[1] - y[1], x[2] - y[2]
    return d0 * d0 + d1 * d1 + d2 * d2


@numba.njit(cache=True)
def _closest_degenerate(p, a, b, c):
    best = a.copy()
    best_d = np.inf
    region = REGION_VERTEX
    for i in range(3):
        if i == 0:
            u, v = a, b
        elif i == 1:
            u, v = b, c
        else:
            u, v = c, a
        x, t = _closest_on_segment(p, u, v)
        d = _dist2(p, x)
        if d < best_d:
            best_d = d
            best = x
            region = REGION_VERTEX if (t <= 0.0 or t >= 1.0) else REGION_EDGE
    return best, region


@numba.njit(cache=True)
def closest_point_triangle_kernel(p, a, b, c):
    """Exact closest point on triangle abc (Voronoi-region walk).

    Returns (closest, region). Degenerate triangles fall back to the three
    edges treated as segments.
    """
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    scale = max(_dist2(a, b), _dist2(b, c), _dist2(a, c))
    if scale == 0.0 or (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) <= 1e-24 * scale * scale:
        return _closest_degenerate(p, a, b, c)

    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy(), REGION_VERTEX

    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b.copy(), REGION_VERTEX

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab, REGION_EDGE

    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c.copy(), REGION_VERTEX

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac, REGION_EDGE

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b), REGION_EDGE

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w, REGION_INTERIOR


def closest_point_triangle(p, a, b, c) -> tuple[float, np.ndarray, str]:
    """Distance, closest point and region tag ('vertex'/'edge'/'interior')."""
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    x, region = closest_point_triangle_kernel(p, a, b, c)
    return float(np.linalg.norm(p - x)), x, REGION_NAMES[int(region)]


# ---------------------------------------------------------------------------
# BVH


@dataclass(frozen=True)
class SpatialIndex:
    """Binary BVH over a mesh's faces (median split on the longest centroid axis)."""

    mesh: TriangleMesh
    tris: np.ndarray  # (F, 3, 3) float64, original face order
    order: np.ndarray  # leaf face order, indices into tris
    box_lo: np.ndarray  # (nodes, 3)
    box_hi: np.ndarray
    left: np.ndarray  # child node ids, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into `order`
    count: np.ndarray

    @classmethod
    def build(cls, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> "SpatialIndex":
        if mesh.n_faces == 0:
            raise ValidationError("cannot build a spatial index over an empty mesh")
        tris = np.ascontiguousarray(mesh.triangles())
        lo_f, hi_f = tris.min(axis=1), tris.max(axis=1)
        cent = tris.mean(axis=1)
        order = np.arange(mesh.n_faces, dtype=np.int64)

        box_lo, box_hi, left, right, start, count = [], [], [], [], [], []

        def new_node(s, e):
            ids = order[s:e]
            box_lo.append(lo_f[ids].min(axis=0))
            box_hi.append(hi_f[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(left) - 1

        stack = [(new_node(0, len(order)), 0, len(order))]
        while stack:
            node, s, e = stack.pop()
            if e - s <= leaf_size:
                continue
            ids = order[s:e]
            c = cent[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (e - s) // 2
            part = np.argpartition(c[:, axis], mid, kind="introselect")
            order[s:e] = ids[part]
            m = s + mid
            l_id, r_id = new_node(s, m), new_node(m, e)
            left[node], right[node] = l_id, r_id
            count[node] = 0
            stack.append((l_id, s, m))
            stack.append((r_id, m, e))

        return cls(
            mesh=mesh,
            tris=tris,
            order=order,
            box_lo=np.array(box_lo),
            box_hi=np.array(box_hi),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            start=np.array(start, dtype=np.int64),
            count=np.array(count, dtype=np.int64),
        )

    def nearest(self, q) -> tuple[int, float, np.ndarray]:
        """(face_id, distance, closest point) for a single query."""
        f, d, x = self.nearest_many(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return int(f[0]), float(d[0]), x[0]

    def nearest_many(self, Q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        Q = np.ascontiguousarray(np.asarray(Q, dtype=np.float64).reshape(-1, 3))
        return _bvh_query_many(
            Q, self.tris, self.order, self.box_lo, self.box_hi,
            self.left, self.right, self.start, self.count,
        )


def nearest_on_mesh(index: SpatialIndex, q) -> tuple[int, float, np.ndarray]:
    return index.nearest(q)


@numba.njit(cache=True)
def _box_dist2(p, lo, hi):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            s += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            s += d * d
    return s


@numba.njit(cache=True)
def _bvh_pass(p, tris, order, box_lo, box_hi, left, right, start, count, bound, pick_lowest):
    """One traversal.

    pick_lowest=False: find the minimum distance (bound is ignored).
    pick_lowest=True: among faces with distance <= bound, the lowest index.
    """
    best_d = np.inf
    best_f = -1
    best_x = np.zeros(3)
    stack = np.empty(128, dtype=np.int64)
    top = 1
    stack[0] = 0
    while top > 0:
        top -= 1
        node = stack[top]
        bd = np.sqrt(_box_dist2(p, box_lo[node], box_hi[node]))
        limit = bound if pick_lowest else best_d
        if bd > limit:
            continue
        if left[node] < 0:
            for i in range(start[node], start[node] + count[node]):
                f = order[i]
                x, _ = closest_point_triangle_kernel(p, tris[f, 0], tris[f, 1], tris[f, 2])
                d = np.sqrt(_dist2(p, x))
                if pick_lowest:
                    if d <= bound and (best_f < 0 or f < best_f):
                        best_d, best_f, best_x = d, f, x
                elif d < best_d or (d == best_d and f < best_f):
                    best_d, best_f, best_x = d, f, x
        else:
            l, r = left[node], right[node]
            dl = _box_dist2(p, box_lo[l], box_hi[l])
            dr = _box_dist2(p, box_lo[r], box_hi[r])
            # nearer child on top of the stack
            if dl < dr:
                stack[top] = r
                stack[top + 1] = l
            else:
                stack[top] = l
                stack[top + 1] = r
            top += 2
    return best_f, best_d, best_x


@numba.njit(cache=True)
def _bvh_query_one(p, tris, order, box_lo, box_hi, left, right, start, count):
    _, dmin, _ = _bvh_pass(p, tris, order, box_lo, box_hi, left, right, start, count, 0.0, False)
    f, _, x = _bvh_pass(p, tris, order, box_lo, box_hi, left, right, start, count, dmin + TIE_TOL, True)
    return f, dmin, x


@numba.njit(parallel=True, cache=True)
def _bvh_query_many(Q, tris, order, box_lo, box_hi, left, right, start, count):
    n = Q.shape[0]
    faces = np.empty(n, dtype=np.int64)
    dists = np.empty(n)
    pts = np.empty((n, 3))
    for i in numba.prange(n):
        f, d, x = _bvh_query_one(Q[i], tris, order, box_lo, box_hi, left, right, start, count)
        faces[i] = f
        dists[i] = d
        pts[i] = x
    return faces, dists, pts


# ---------------------------------------------------------------------------
# surface sampling


@dataclass(frozen=True)
class SurfaceSamples:
    positions: np.ndarray  # (n, 3)
    face_ids: np.ndarray  # (n,)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.positions)


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> SurfaceSamples:
    """Area-weighted face choice, uniform barycentric point within the face."""
    areas = mesh.face_areas()
    total = areas.sum()
    if mesh.n_faces == 0 or not total > 0.0:
        raise DegenerateGeometryError("no face with positive area to sample from")
    if n == 0:
        return SurfaceSamples(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    rng = np.random.default_rng(seed)
    face_ids = rng.choice(mesh.n_faces, size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    t = mesh.triangles()[face_ids]
    pos = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    return SurfaceSamples(pos, face_ids.astype(np.int64), mesh.labels_or_zero()[face_ids])


# ---------------------------------------------------------------------------
# file IO


def labels_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".labels")


def read_labels(path: str | Path) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected an integer label, got {line!r}") from None
    return np.array(out, dtype=np.int64)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels))


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _parse_obj(path: Path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                try:
                    verts.append([float(x) for x in rest[:3]])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad vertex record") from None
                if len(rest) < 3:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                try:
                    idx = [int(tok.split("/")[0]) for tok in rest]
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad face record") from None
                if len(idx) < 3:
                    raise FormatError(f"{path}:{lineno}: face needs at least 3 vertices")
                # OBJ is 1-based; negative indices count back from the current vertex
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend(_fan(idx))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    blob = path.read_bytes()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: byte 0: not a PLY file")
    nl = blob.find(b"\n", end)
    body_start = len(blob) if nl < 0 else nl + 1
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[dict] = []
    for lineno, line in enumerate(header, 1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}:{lineno}: property before element")
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}:{lineno}: unknown property type {tok[1]!r}")
                elements[-1]["props"].append((tok[2], "scalar", _PLY_TYPES[tok[1]], None))
        else:
            raise FormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    data: dict[str, dict[str, list]] = {}
    if fmt == "ascii":
        lines = blob[body_start:].decode("ascii", errors="replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        cursor = 0
        first_line = len(header) + 2
        for el in elements:
            cols: dict[str, list] = {p[0]: [] for p in el["props"]}
            for _ in range(el["count"]):
                if cursor >= len(lines):
                    raise ValidationError(
                        f"{path}: header declares {el['count']} {el['name']} records, file ends early"
                    )
                tok = lines[cursor].split()
                pos = 0
                try:
                    for name, kind, t, _t2 in el["props"]:
                        if kind == "list":
                            k = int(tok[pos])
                            cols[name].append([int(float(x)) for x in tok[pos + 1: pos + 1 + k]])
                            if len(cols[name][-1]) != k:
                                raise IndexError
                            pos += 1 + k
                        else:
                            cols[name].append(float(tok[pos]))
                            pos += 1
                except (ValueError, IndexError):
                    raise FormatError(f"{path}:{first_line + cursor}: malformed {el['name']} record") from None
                cursor += 1
            data[el["name"]] = cols
        if cursor != len(lines):
            raise ValidationError(
                f"{path}: {len(lines) - cursor} records beyond the counts declared in the header"
            )
    else:
        off = body_start
        for el in elements:
            cols = {p[0]: [] for p in el["props"]}
            scalar_only = all(p[1] == "scalar" for p in el["props"])
            if scalar_only:
                dt = np.dtype([(p[0], "<" + p[2]) for p in el["props"]])
                need = dt.itemsize * el["count"]
                if off + need > len(blob):
                    raise ValidationError(
                        f"{path}: byte {off}: header declares {el['count']} {el['name']} records, file ends early"
                    )
                arr = np.frombuffer(blob, dtype=dt, count=el["count"], offset=off)
                off += need
                for p in el["props"]:
                    cols[p[0]] = arr[p[0]].astype(np.float64)
            else:
                for _ in range(el["count"]):
                    for name, kind, t, t2 in el["props"]:
                        try:
                            if kind == "list":
                                (k,) = struct.unpack_from("<" + _struct_code(t), blob, off)
                                off += np.dtype(t).itemsize
                                vals = np.frombuffer(blob, dtype="<" + t2, count=int(k), offset=off)
                                off += np.dtype(t2).itemsize * int(k)
                                cols[name].append(vals.astype(np.int64).tolist())
                            else:
                                (x,) = struct.unpack_from("<" + _struct_code(t), blob, off)
                                off += np.dtype(t).itemsize
                                cols[name].append(x)
                        except (struct.error, ValueError):
                            raise ValidationError(
                                f"{path}: byte {off}: header declares {el['count']} {el['name']} records, file ends early"
                            ) from None
            data[el["name"]] = cols
        if off != len(blob):
            raise ValidationError(f"{path}: byte {off}: {len(blob) - off} trailing bytes after declared records")

    vert = data.get("vertex")
    if vert is None or not all(k in vert for k in "xyz"):
        raise FormatError(f"{path}: PLY needs a vertex element with x, y, z")
    V = np.stack([np.asarray(vert[k], dtype=np.float64) for k in "xyz"], axis=1).reshape(-1, 3)
    tris, labels = [], None
    face = data.get("face")
    if face is not None:
        key = "vertex_indices" if "vertex_indices" in face else "vertex_index" if "vertex_index" in face else None
        if key is None:
            raise FormatError(f"{path}: face element without vertex_indices")
        lab_src = face.get("label")
        lab = []
        for i, poly in enumerate(face[key]):
            poly = list(poly)
            if len(poly) < 3:
                raise FormatError(f"{path}: face {i} has fewer than 3 vertices")
            fan = _fan(poly)
            tris.extend(fan)
            if lab_src is not None:
                lab.extend([int(lab_src[i])] * len(fan))
        if lab_src is not None:
            labels = np.array(lab, dtype=np.int64)
    return V, np.array(tris, dtype=np.int64).reshape(-1, 3), labels


def _struct_code(t: str) -> str:
    return {"i1": "b", "u1": "B", "i2": "h", "u2": "H", "i4": "i", "u4": "I", "f4": "f", "f8": "d"}[t]


def load_mesh(path: str | Path) -> TriangleMesh:
    """Read an OBJ or PLY mesh; polygons are fan-triangulated.

    Per-face labels come from a ``.labels`` sidecar next to the file when one
    exists (one integer per line, counted per triangle after triangulation),
    otherwise from a PLY face ``label`` property.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    labels = None
    if suffix == ".obj":
        V, F = _parse_obj(path)
    elif suffix == ".ply":
        V, F, labels = _parse_ply(path)
    else:
        raise FormatError(f"{path}: unsupported mesh extension {suffix!r}")
    side = labels_path(path)
    if side.exists():
        labels = read_labels(side)
    return TriangleMesh(V, F, labels)


def write_ply(path: str | Path, vertices: np.ndarray, faces: np.ndarray | None = None,
              vertex_labels: np.ndarray | None = None, face_labels: np.ndarray | None = None,
              ascii: bool = False) -> None:
    """Write points or a triangle mesh as PLY (binary little-endian by default)."""
    V = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    F = None if faces is None else np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    lines = ["ply", f"format {'ascii' if ascii else 'binary_little_endian'} 1.0",
             f"element vertex {len(V)}", "property float x", "property float y", "property float z"]
    if vertex_labels is not None:
        lines.append("property int label")
    if F is not None:
        lines += [f"element face {len(F)}", "property list uchar int vertex_indices"]
        if face_labels is not None:
            lines.append("property int label")
    lines.append("end_header")
    head = ("\n".join(lines) + "\n").encode("ascii")

    vdt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if vertex_labels is not None:
        vdt.append(("label", "<i4"))
    vrec = np.zeros(len(V), dtype=vdt)
    vrec["x"], vrec["y"], vrec["z"] = V[:, 0], V[:, 1], V[:, 2]
    if vertex_labels is not None:
        vrec["label"] = np.asarray(vertex_labels).reshape(-1)
    frec = None
    if F is not None:
        fdt = [("n", "u1"), ("i", "<i4", (3,))]
        if face_labels is not None:
            fdt.append(("label", "<i4"))
        frec = np.zeros(len(F), dtype=fdt)
        frec["n"] = 3
        frec["i"] = F
        if face_labels is not None:
            frec["label"] = np.asarray(face_labels).reshape(-1)

    with open(path, "wb") as fh:
        fh.write(head)
        if ascii:
            body = []
            for r in vrec:
                body.append(" ".join(repr(float(r[k])) if k in "xyz" else str(int(r[k])) for k in vrec.dtype.names))
            if frec is not None:
                for r in frec:
                    row = ["3"] + [str(int(x)) for x in r["i"]]
                    if face_labels is not None:
                        row.append(str(int(r["label"])))
                    body.append(" ".join(row))
            fh.write(("\n".join(body) + ("\n" if body else "")).encode("ascii"))
        else:
            fh.write(vrec.tobytes())
            if frec is not None:
                fh.write(frec.tobytes())


def read_points_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Positions and optional per-vertex ``label`` from a PLY point cloud."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = path.read_bytes()
    end = blob.find(b"end_header")
    header = blob[:max(end, 0)].decode("ascii", errors="replace")
    has_label = re.search(r"element vertex \d+\s*\n(?:property (?!list)\S+ \S+\s*\n)*?property \S+ label", header)
    V, _, _ = _parse_ply(path)
    labels = None
    if has_label:
        labels = _ply_vertex_column(path, "label")
    return V, labels


def _ply_vertex_column(path: Path, name: str) -> np.ndarray:
    blob = path.read_bytes()
    end = blob.find(b"end_header")
    body = blob.find(b"\n", end) + 1
    header = blob[:end].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt == "ascii":
        rows = [ln.split() for ln in blob[body:].decode("ascii").splitlines() if ln.strip()][:count]
        col = [p[0] for p in props].index(name)
        return np.array([int(float(r[col])) for r in rows], dtype=np.int64)
    dt = np.dtype([(p[0], "<" + p[1]) for p in props])
    return np.frombuffer(blob, dtype=dt, count=count, offset=body)[name].astype(np.int64)
