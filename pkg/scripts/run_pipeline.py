"""Run every stage of the default pipeline for one or more seeds and print the step sweeps.

    python scripts/run_pipeline.py --out runs/default --seeds 0 1 2
"""

import argparse
from pathlib import Path

from flowdistill import config
from flowdistill import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default", help="root directory; one sub-directory per seed")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--config", help="TOML config; defaults to the built-in one")
    args = ap.parse_args()
    for seed in args.seeds:
        cfg = config.load(args.config) if args.config else config.ExperimentConfig()
        cfg.seed = seed
        cfg.output_dir = str(Path(args.out) / f"seed{seed}")
        timings = ex.run_seed(cfg, cfg.output_dir)
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.0f}s" for k, v in sorted(timings.items())))
        for model, sweep in ex.seed_summary(cfg.output_dir).items():
            print(f"  {model:10s} " + "  ".join(f"{k}-step {v:7.2f}" for k, v in sweep.items()))


if __name__ == "__main__":
    main()
