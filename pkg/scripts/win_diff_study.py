"""Round-1 Win Diff with and without the reflow term, from finished pipeline runs.

    python scripts/win_diff_study.py --out runs/default --seeds 0 1 2
"""

import argparse
from pathlib import Path

from flowdistill import experiments as ex
from flowdistill.config import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 2.0])
    args = ap.parse_args()
    for seed in args.seeds:
        cfg = ExperimentConfig(seed=seed, output_dir=str(Path(args.out) / f"seed{seed}"))
        parts = []
        for lam in args.lambdas:
            wd = ex.win_diff_study(cfg, cfg.output_dir, lam)
            parts.append(f"lambda_rf={lam:g}: {ex.final_quartile(wd):.4f}")
        print(f"seed {seed} final-quartile Win Diff  " + "  ".join(parts))


if __name__ == "__main__":
    main()
