"""On/off-surface query samples with unsigned-distance and semantic targets."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, TruncatedFileError, ValidationError
from .geomcore import SpatialIndex, TriangleMesh, sample_surface

MAGIC = b"RUQS"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")
_SAMPLE = np.dtype([("pos", "<f4", (3,)), ("udf", "<f4"), ("label", "<u4")])
NOISE_SIGMAS = (0.01, 0.03, 0.08)


class QuerySample(NamedTuple):
    position: np.ndarray
    udf: float
    label: int


@dataclass
class SampleBlock:
    """Column-oriented samples: positions (n, 3) f32, udf (n,) f32, labels (n,) u32."""

    positions: np.ndarray
    udf: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        self.udf = np.asarray(self.udf, dtype=np.float32).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.uint32).reshape(-1)
        if not (len(self.positions) == len(self.udf) == len(self.labels)):
            raise ValidationError("sample columns have different lengths")

    @classmethod
    def empty(cls) -> "SampleBlock":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.udf)

    def __getitem__(self, i: int) -> QuerySample:
        return QuerySample(self.positions[i], float(self.udf[i]), int(self.labels[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleBlock):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.udf, other.udf)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class QuerySet:
    on_surface: SampleBlock
    off_surface: SampleBlock
    class_count: int = 1
    mesh_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 1:
            raise ValidationError("class_count must be >= 1")
        for block in (self.on_surface, self.off_surface):
            if len(block) and int(block.labels.max()) >= self.class_count:
                raise ValidationError(
                    f"label {int(block.labels.max())} >= class count {self.class_count}"
                )

    def __len__(self) -> int:
        return len(self.on_surface) + len(self.off_surface)

    def all_samples(self) -> SampleBlock:
        return SampleBlock(
            np.concatenate([self.on_surface.positions, self.off_surface.positions]),
            np.concatenate([self.on_surface.udf, self.off_surface.udf]),
            np.concatenate([self.on_surface.labels, self.off_surface.labels]),
        )

    def label_mask(self, fraction: float) -> np.ndarray:
        """Which samples (in ``all_samples`` order) keep their semantic label.

        Derived from the set's seed, so a given fraction always selects the
        same subset. At least one sample is kept for any fraction > 0.
        """
        n = len(self)
        if fraction >= 1.0:
            return np.ones(n, dtype=bool)
        mask = np.zeros(n, dtype=bool)
        if fraction <= 0.0 or n == 0:
            return mask
        k = max(1, int(round(fraction * n)))
        rng = np.random.default_rng([self.seed, 0x5E6])
        mask[rng.choice(n, size=k, replace=False)] = True
        return mask


@dataclass
class QueryConfig:
    n_on: int = 10_000
    n_off: int = 100_000
    noise_sigmas: tuple[float, ...] = NOISE_SIGMAS
    uniform_fraction: float = 0.1
    seed: int = 0
    class_count: int | None = None


def generate_query_set(mesh: TriangleMesh, cfg: QueryConfig | None = None,
                       index: SpatialIndex | None = None, mesh_id: str = "") -> QuerySet:
    """Sample on-surface points (udf 0) and off-surface points (udf by nearest face).

    Off-surface points are a surface sample plus isotropic Gaussian noise with
    sigma picked uniformly from ``noise_sigmas``; ``uniform_fraction`` of them
    are drawn uniformly in the cube instead. Positions are clamped to the cube.
    """
    cfg = cfg or QueryConfig()
    C = mesh.class_count
    if cfg.class_count is not None:
        if cfg.class_count < C:
            raise ValidationError(f"class_count {cfg.class_count} but mesh has label {C - 1}")
        C = cfg.class_count
    index = index or SpatialIndex.build(mesh)
    face_labels = mesh.labels_or_zero()

    on = sample_surface(mesh, cfg.n_on, seed=cfg.seed)
    on_block = SampleBlock(on.positions, np.zeros(len(on)), on.labels)

    rng = np.random.default_rng([cfg.seed, 1])
    n_uni = int(round(cfg.uniform_fraction * cfg.n_off))
    n_near = cfg.n_off - n_uni
    if cfg.n_off:
        base = sample_surface(mesh, n_near, seed=int(rng.integers(2**63))).positions
        sig = rng.choice(np.asarray(cfg.noise_sigmas, dtype=np.float64), size=n_near)
        near = base + rng.normal(size=(n_near, 3)) * sig[:, None]
        uni = rng.uniform(-0.5, 0.5, size=(n_uni, 3))
        pts = np.clip(np.concatenate([near, uni]), -0.5, 0.5)
        # targets are computed at the stored f32 positions
        pts = pts.astype(np.float32).astype(np.float64)
        faces, dist, _ = index.nearest_many(pts)
        off_block = SampleBlock(pts, dist, face_labels[faces])
    else:
        off_block = SampleBlock.empty()
    return QuerySet(on_block, off_block, class_count=C, mesh_id=mesh_id, seed=cfg.seed)


@dataclass
class SceneRecord:
    """Network input cloud plus its supervision."""

    cloud: np.ndarray  # (N, 3) f32
    queries: QuerySet
    cloud_labels: np.ndarray | None = None
    mesh: TriangleMesh | None = None
    name: str = ""
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.cloud = np.ascontiguousarray(self.cloud, dtype=np.float32).reshape(-1, 3)


def make_scene_record(mesh: TriangleMesh, cfg: QueryConfig | None = None,
                      name: str = "") -> SceneRecord:
    """The on-surface samples double as the input cloud."""
    qs = generate_query_set(mesh, cfg, mesh_id=name)
    return SceneRecord(qs.on_surface.positions, qs, qs.on_surface.labels.astype(np.int64), mesh, name)


# ---------------------------------------------------------------------------
# binary format


def _pack(block: SampleBlock) -> bytes:
    rec = np.zeros(len(block), dtype=_SAMPLE)
    rec["pos"], rec["udf"], rec["label"] = block.positions, block.udf, block.labels
    return rec.tobytes()


def write_query_set(qs: QuerySet, path: str | Path) -> None:
    """Header, samples (on then off), then a JSON trailer with mesh id and seed."""
    trailer = json.dumps({"mesh_id": qs.mesh_id, "seed": qs.seed}).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, qs.class_count, len(qs.on_surface), len(qs.off_surface)))
        fh.write(_pack(qs.on_surface))
        fh.write(_pack(qs.off_surface))
        fh.write(struct.pack("<I", len(trailer)) + trailer)


def read_query_set(path: str | Path) -> QuerySet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, C, n_on, n_off = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: byte 0: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: byte 4: version {version}, expected {VERSION}")
    off = _HEADER.size
    need = off + (n_on + n_off) * _SAMPLE.itemsize
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, samples need {need}")
    rec = np.frombuffer(blob, dtype=_SAMPLE, count=n_on + n_off, offset=off)
    on, offs = rec[:n_on], rec[n_on:]
    meta = {}
    if len(blob) >= need + 4:
        (tlen,) = struct.unpack_from("<I", blob, need)
        if len(blob) < need + 4 + tlen:
            raise TruncatedFileError(f"{path}: metadata trailer cut short")
        try:
            meta = json.loads(blob[need + 4: need + 4 + tlen])
        except json.JSONDecodeError:
            raise FormatError(f"{path}: byte {need + 4}: unreadable metadata trailer") from None
    return QuerySet(
        SampleBlock(on["pos"], on["udf"], on["label"]),
        SampleBlock(offs["pos"], offs["udf"], offs["label"]),
        class_count=C,
        mesh_id=meta.get("mesh_id", ""),
        seed=int(meta.get("seed", 0)),
    )
