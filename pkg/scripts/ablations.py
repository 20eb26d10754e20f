"""Across-seed ablation table from finished pipeline runs (see run_pipeline.py).

    python scripts/ablations.py --out runs/default --seeds 0 1 2 --steps 4
"""

import argparse
from pathlib import Path

import numpy as np

from flowdistill import experiments as ex

ROWS = (
    ("CCD", "ccd"),
    ("DCD", "dcd"),
    ("DA-only", "da_only"),
    ("DCD+DA", "da_dcd"),
    ("CCD+DA", "da"),
    ("CCD+DA+TA r1", "ta_round1"),
    ("CCD+DA+TA r2", "ta_round2"),
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=4)
    args = ap.parse_args()
    dirs = [Path(args.out) / f"seed{s}" for s in args.seeds]
    print(f"Fréchet at {args.steps} steps, seeds {args.seeds}")
    for label, model in ROWS:
        vals = np.array([ex.read_sweep(d, model)[args.steps] for d in dirs])
        sd = vals.std(ddof=1) if len(vals) > 1 else 0.0
        print(f"  {label:14s} {vals.mean():7.2f} +- {sd:5.2f}   " + " ".join(f"{v:7.2f}" for v in vals))
    ccd = np.array([ex.read_sweep(d, "ccd")[args.steps] for d in dirs])
    da = np.array([ex.read_sweep(d, "da")[args.steps] for d in dirs])
    mean, sd, wins = ex.paired_margin(da, ccd)
    print(f"CCD - CCD+DA per seed: mean {mean:.2f}, sd {sd:.2f}, DA better on {wins}/{len(dirs)} seeds")


if __name__ == "__main__":
    main()
