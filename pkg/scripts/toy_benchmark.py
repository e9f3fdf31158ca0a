#!/usr/bin/env python3
"""Train on procedural rooms, then score dense reconstruction and labels on held-out rooms.

    python scripts/toy_benchmark.py --steps 1500 --variants full no_range_term --out runs/toy.json
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, replace

import numpy as np

from rangeudf.experiments import ToyConfig, evaluate_scene, toy_scenes, train_toy

VARIANTS = {
    "full": {},
    "no_range_term": {"no_range_term": True},
    "sem_with_q": {"sem_with_q": True},
    "no_uncertainty": {"uncertainty": False},
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=ToyConfig.steps)
    ap.add_argument("--n-train", type=int, default=ToyConfig.n_train)
    ap.add_argument("--n-test", type=int, default=ToyConfig.n_test)
    ap.add_argument("--n-dense", type=int, default=ToyConfig.n_dense)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--queries", type=int, default=ToyConfig.queries_per_scene)
    ap.add_argument("--eval-gt-points", type=int, default=ToyConfig.eval_gt_points)
    ap.add_argument("--train-encoder", action="store_true", help="train the point encoder as well")
    ap.add_argument("--variants", nargs="+", default=["full", "no_range_term"], choices=sorted(VARIANTS))
    ap.add_argument("--out", default=None, help="write per-scene scores as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = ToyConfig(steps=args.steps, n_train=args.n_train, n_test=args.n_test,
                     n_dense=args.n_dense, seed=args.seed,
                     queries_per_scene=args.queries, eval_gt_points=args.eval_gt_points,
                     train_encoder=args.train_encoder)
    train, test = toy_scenes(base, "train"), toy_scenes(base, "test")
    results = {}
    for name in args.variants:
        cfg = replace(base, **VARIANTS[name])
        t0 = time.perf_counter()
        params = train_toy(cfg, train, on_step=lambda row: row["epoch"] % 10 == 0 and logging.info(
            "%s step %d l1 %.4f ce %.3f", name, row["step"], row["l1"], row["ce"]))
        t_train = time.perf_counter() - t0
        scores = [evaluate_scene(params, sc, cfg) for sc in test]
        t_eval = time.perf_counter() - t0 - t_train
        cd = float(np.mean([s.recon.cd_l1 for s in scores]))
        fs = float(np.mean([s.recon.fs_delta for s in scores]))
        miou = float(np.mean([s.miou for s in scores]))
        print(f"{name:>15}: CD-L1 {cd * 1e2:.3f}e-2  FS-d {fs:.3f}  mIoU {miou:.3f}  "
              f"train {t_train:.0f}s eval {t_eval:.0f}s", flush=True)
        results[name] = {"cd_l1": cd, "fs_delta": fs, "miou": miou, "train_s": t_train, "eval_s": t_eval,
                         "scenes": [dict(asdict(s.recon), name=s.name, miou=s.miou, oa=s.oa) for s in scores]}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"config": asdict(base), "results": results}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
