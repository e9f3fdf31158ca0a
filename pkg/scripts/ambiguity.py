#!/usr/bin/env python3
"""Train each interpolation variant on the paired ambiguity set and report its l1 against the floor.

    python scripts/ambiguity.py --steps 2000 --variants full no_range_term bundle_only idw
"""
from __future__ import annotations

import argparse
import json
from dataclasses import asdict

from rangeudf.experiments import AMBIGUITY_VARIANTS, run_ambiguity


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--offset", type=float, default=0.05)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--queries", type=int, default=512)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--variants", nargs="+", default=list(AMBIGUITY_VARIANTS), choices=list(AMBIGUITY_VARIANTS))
    ap.add_argument("--out", default=None, help="write the learning curves as JSON")
    args = ap.parse_args()

    rows = []
    for variant in args.variants:
        for seed in args.seeds:
            r = run_ambiguity(variant, offset=args.offset, steps=args.steps, seed=seed, n_queries=args.queries)
            print(f"{variant:>14} seed {seed}: l1 {r.final_l1:.4f}  floor {r.floor:.4f}  "
                  f"min {min(r.curve):.4f}  {r.seconds:.0f}s", flush=True)
            rows.append(asdict(r) | {"seed": seed})
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
