"""``rangeudf`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 invalid input (bad arguments, config, file contents
or an extraction that cannot succeed), 2 IO failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ExtractionError, ValidationError

log = logging.getLogger("rangeudf")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; here usage errors are validation errors (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class ExtractionParams:
    n_min: int = 100_000
    threshold: float = 0.1
    iters: int = 5
    resolution: int = 128
    level: float = 0.003
    finite_difference: bool = False


@dataclass
class MetricParams:
    delta: float = 0.005
    gt_samples: int = 100_000


@dataclass
class AblationParams:
    steps: int = 300
    n_train: int = 8
    n_test: int = 2
    K_values: list[int] = field(default_factory=lambda: [1, 4, 8, 16])
    n_dense: int = 20_000
    queries_per_scene: int = 1024
    train_encoder: bool = False


@dataclass
class RunConfig:
    train: dict = field(default_factory=dict)  # TrainConfig fields
    train_data: list[str] = field(default_factory=list)
    test_data: list[str] = field(default_factory=list)
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    metrics: MetricParams = field(default_factory=MetricParams)
    ablation: AblationParams = field(default_factory=AblationParams)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .training import TrainConfig

        if not isinstance(d, dict):
            raise ValidationError("run config must be a JSON object")
        _reject_unknown(cls, d, "run config")
        out = cls()
        if "train" in d:
            TrainConfig.from_dict(d["train"])  # validate early
            out.train = dict(d["train"])
        for key in ("train_data", "test_data"):
            if key in d:
                if not isinstance(d[key], list) or not all(isinstance(p, str) for p in d[key]):
                    raise ValidationError(f"{key} must be a list of paths")
                setattr(out, key, list(d[key]))
        for key, typ in (("extraction", ExtractionParams), ("metrics", MetricParams),
                         ("ablation", AblationParams)):
            if key in d:
                _reject_unknown(typ, d[key], key)
                setattr(out, key, typ(**d[key]))
        return out

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: line {e.lineno}: {e.msg}") from None
        return cls.from_dict(doc)

    def train_config(self, **overrides):
        from .training import TrainConfig

        return TrainConfig.from_dict({**self.train, **overrides})


def _reject_unknown(typ, d, where: str) -> None:
    if not isinstance(d, dict):
        raise ValidationError(f"{where} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(typ)}
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# helpers


def set_threads(n: int | None) -> int:
    """Cap BLAS and numba worker pools; ``None`` falls back to RANGEUDF_THREADS, then all cores."""
    import numba
    from threadpoolctl import threadpool_limits

    if n is None:
        env = os.environ.get("RANGEUDF_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ValidationError(f"RANGEUDF_THREADS={env!r} is not an integer") from None
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValidationError("thread count must be >= 1")
    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _read_cloud(path: str, gt_samples: int = 100_000, seed: int = 0):
    """Positions and optional labels from a .ruqs file, a point PLY, or a mesh (surface-sampled)."""
    from .dataset import read_query_set
    from .geomcore import load_mesh, read_points_ply, sample_surface

    p = Path(path)
    if p.suffix.lower() == ".ruqs":
        qs = read_query_set(p)
        return qs.on_surface.positions.astype(np.float32), qs.on_surface.labels.astype(np.int64)
    if p.suffix.lower() == ".ply":
        V, labels = read_points_ply(p)
        mesh = load_mesh(p)
        if mesh.n_faces == 0:
            return V.astype(np.float32), labels
    else:
        mesh = load_mesh(p)
    s = sample_surface(mesh, gt_samples, seed=seed)
    return s.positions.astype(np.float32), (s.labels if mesh.face_labels is not None else None)


def _scene_records(paths: list[str]):
    from .dataset import SceneRecord, read_query_set

    out = []
    for path in paths:
        qs = read_query_set(path)
        out.append(SceneRecord(qs.on_surface.positions, qs, qs.on_surface.labels.astype(np.int64),
                               name=Path(path).stem))
    return out


def _model_scene(args, ckpt):
    from .pointnet import feature_cloud

    cloud, _ = _read_cloud(args.cloud, seed=args.seed)
    return feature_cloud(cloud, ckpt.params.encoder, seed=ckpt.config.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args) -> int:
    from .scenes import SceneSpec, build_scene, random_room, write_scene

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.spec:
        specs = [SceneSpec.from_json(Path(args.spec).read_text())]
    else:
        specs = [random_room(args.seed + i, density=args.density) for i in range(args.count)]
    for i, spec in enumerate(specs):
        mesh = build_scene(spec)
        stem = out / f"scene_{i:03d}"
        write_scene(mesh, stem.with_suffix(".ply"))
        stem.with_suffix(".json").write_text(spec.to_json())
        log.info("wrote %s.ply (%d faces, %d classes)", stem, mesh.n_faces, mesh.class_count)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .dataset import QueryConfig, generate_query_set, write_query_set
    from .geomcore import load_mesh, normalize_unit_cube

    mesh = load_mesh(args.mesh)
    if args.normalize:
        mesh, _ = normalize_unit_cube(mesh)
    cfg = QueryConfig(n_on=args.n_on, n_off=args.n_off, seed=args.seed, class_count=args.classes)
    qs = generate_query_set(mesh, cfg, mesh_id=Path(args.mesh).stem)
    write_query_set(qs, args.out)
    log.info("wrote %s: %d on-surface, %d off-surface samples", args.out, len(qs.on_surface), len(qs.off_surface))
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import fit

    rc = RunConfig.load(args.config)
    tcfg = rc.train_config(seed=args.seed)
    paths = args.data or rc.train_data
    if not paths:
        raise ValidationError("no training data: pass --data or set train_data in the config")
    scenes = _scene_records(paths)
    if args.steps is not None:
        # a step budget: repeat passes until it is spent
        per_epoch = -(-len(scenes) // tcfg.batch_scenes)
        tcfg = replace(tcfg, epochs=-(-args.steps // per_epoch))
    rows = []

    def on_epoch(epoch, row):
        rows.append(row)
        log.info("epoch %d step %d total %.4f l1 %.4f ce %.4f", epoch, row["step"], row["total"], row["l1"], row["ce"])

    fit(scenes, tcfg, checkpoint_path=args.out, checkpoint_every=args.checkpoint_every,
        on_epoch=on_epoch, max_steps=args.steps)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "total", "l1", "ce", "s1", "s2"])
        w.writeheader()
        w.writerows(rows)
    log.info("wrote %s and %s", args.out, log_path)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .extraction import ModelField, extract_dense_points, extract_mesh, label_points
    from .geomcore import write_ply
    from .training import load_checkpoint

    if not (args.points or args.mesh):
        raise ValidationError("nothing to do: pass --points and/or --mesh")
    rc = RunConfig.load(args.config)
    ex = rc.extraction
    ckpt = load_checkpoint(args.checkpoint)
    scene = _model_scene(args, ckpt)
    field_ = ModelField(scene, ckpt.params, finite_difference=ex.finite_difference)
    if args.points:
        n_min = args.n_min or ex.n_min
        dense = extract_dense_points(field_, n_min, threshold=ex.threshold, iters=ex.iters, seed=args.seed)
        labels = label_points(ckpt.params, scene, dense.positions) if ckpt.params.config.n_classes > 1 else None
        write_ply(args.points, dense.positions, vertex_labels=labels)
        log.info("wrote %d points to %s", len(dense), args.points)
    if args.mesh:
        mesh = extract_mesh(field_, resolution=args.resolution or ex.resolution, level=ex.level)
        write_ply(args.mesh, mesh.vertices, mesh.faces)
        log.info("wrote mesh with %d faces to %s", mesh.n_faces, args.mesh)
    return EXIT_OK


def cmd_segment(args) -> int:
    from .extraction import label_points
    from .geomcore import read_points_ply, write_ply
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    scene = _model_scene(args, ckpt)
    pts, _ = read_points_ply(args.points)
    labels = label_points(ckpt.params, scene, pts)
    write_ply(args.out, pts, vertex_labels=labels)
    log.info("labeled %d points -> %s", len(pts), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import reconstruction_report, seg_metrics

    rc = RunConfig.load(args.config)
    delta = args.delta if args.delta is not None else rc.metrics.delta
    pred, pl = _read_cloud(args.pred, rc.metrics.gt_samples, seed=args.seed)
    gt, gl = _read_cloud(args.gt, rc.metrics.gt_samples, seed=args.seed)
    doc = {"reconstruction": asdict(reconstruction_report(pred, gt, delta=delta))}
    if args.classes:
        if pl is None or gl is None:
            raise ValidationError("--classes needs labels on both pred and gt")
        if len(pl) != len(gl):
            # score labels at gt points, taking each gt point's nearest prediction
            from scipy.spatial import cKDTree

            pl = pl[cKDTree(pred).query(gt, k=1)[1]]
        seg = seg_metrics(pl, gl, args.classes)
        doc["segmentation"] = json.loads(seg.to_json())
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ToyConfig, evaluate_scene, toy_scenes, train_toy

    rc = RunConfig.load(args.config)
    ab = rc.ablation
    base = ToyConfig(n_train=ab.n_train, n_test=ab.n_test, steps=args.steps or ab.steps,
                     n_dense=ab.n_dense, seed=args.seed, queries_per_scene=ab.queries_per_scene,
                     train_encoder=ab.train_encoder)
    grid = [("full", {}), ("no_range_term", {"no_range_term": True}), ("sem_with_q", {"sem_with_q": True}),
            ("no_uncertainty", {"uncertainty": False})]
    grid += [(f"K={k}", {"K": k}) for k in ab.K_values if k != base.K]
    train, test = toy_scenes(base, "train"), toy_scenes(base, "test")
    rows = []
    for name, kw in grid:
        cfg = replace(base, **kw)
        params = train_toy(cfg, train)
        scores = [evaluate_scene(params, sc, cfg) for sc in test]
        row = {"variant": name,
               "cd_l1_x1e2": 100 * float(np.mean([s.recon.cd_l1 for s in scores])),
               "cd_l2_x1e4": 1e4 * float(np.mean([s.recon.cd_l2 for s in scores])),
               "fs_delta": float(np.mean([s.recon.fs_delta for s in scores])),
               "miou": float(np.mean([s.miou for s in scores])),
               "oa": float(np.mean([s.oa for s in scores]))}
        rows.append(row)
        log.info("%s: %s", name, row)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def common_flags(defaults: bool) -> argparse.ArgumentParser:
        # subcommands accept the same flags; their defaults must not mask a value given earlier
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--seed", type=int, default=d(0))
        c.add_argument("--threads", type=int, default=d(None),
                       help="worker cap for BLAS and numba (default: $RANGEUDF_THREADS, else all cores)")
        c.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return c

    ap = _Parser(prog="rangeudf", description="Range-aware UDF pipeline", parents=[common_flags(True)])
    common = common_flags(False)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scenes", parents=[common], help="procedural rooms or a SceneSpec -> labeled PLY")
    p.add_argument("--spec", help="SceneSpec JSON; default is random rooms")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--density", type=int, default=8)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("gen-data", parents=[common], help="mesh -> query-set file")
    p.add_argument("mesh")
    p.add_argument("--out", required=True)
    p.add_argument("--n-on", type=int, default=10_000)
    p.add_argument("--n-off", type=int, default=100_000)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--normalize", action="store_true", help="fit the mesh into the unit cube first")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="query-set files -> checkpoint + CSV loss log")
    p.add_argument("--data", nargs="*", default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], help="checkpoint + cloud -> dense points / mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True, help="input cloud: .ruqs, point PLY or mesh")
    p.add_argument("--config")
    p.add_argument("--points", help="dense point PLY output")
    p.add_argument("--mesh", help="mesh PLY output")
    p.add_argument("--n-min", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("segment", parents=[common], help="checkpoint + cloud + points -> labeled PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="pred vs gt -> JSON report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--classes", type=int, default=None, help="also score labels over this many classes")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="ablation grid on procedural rooms -> CSV table")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)
    return ap


def run(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        set_threads(args.threads)
        return args.func(args)
    except (ValidationError, ExtractionError) as e:
        print(f"rangeudf {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"rangeudf {args.command}: io error: {e}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
