"""Command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 refused (outputs exist or directory locked),
2 configuration error, 3 missing prerequisite, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_REFUSED, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 1, 2, 3, 4

COMMANDS = (
    "train-teacher", "distill-ccd", "distill-dcd", "align-da", "align-ta",
    "sample", "eval", "sweep", "ablate", "export", "schema", "init-config",
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowdistill", description="Toy flow-model distillation lab.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config (defaults are used when omitted)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="master seed (overrides seed)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "align-da":
            sp.add_argument("--distill", choices=("ccd", "dcd", "none"), default="ccd")
        if name == "align-ta":
            sp.add_argument("--round", type=int, default=1)
        if name in ("sample", "eval", "sweep"):
            sp.add_argument("--model", default="da")
            sp.add_argument("--n", type=int)
        if name in ("sample", "eval"):
            sp.add_argument("--steps", type=int)
        if name == "ablate":
            sp.add_argument("--axis", default="t_sampler")
        if name == "init-config":
            sp.add_argument("path")
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from . import config

    cfg = config.load(args.config) if args.config else config.from_dict(config.apply_env({}, os.environ))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    cfg.validate()
    return cfg


def run(args) -> str:
    from . import config, pipeline

    if args.cmd == "schema":
        return "\n".join(config.schema())
    cfg = _load_config(args)
    if args.cmd == "init-config":
        config.save(cfg, args.path)
        return f"wrote {args.path}"
    if args.cmd == "export":
        paths = pipeline.export_plotdata(cfg.output_dir)
        return "\n".join(str(p) for p in paths)

    r = pipeline.Run(cfg, force=args.force)
    with r.lock():
        if args.cmd == "train-teacher":
            pipeline.run_teacher(r)
            return f"teacher -> {r.path('teacher.ckpt')}"
        if args.cmd in ("distill-ccd", "distill-dcd"):
            method = args.cmd.split("-")[1]
            pipeline.run_distill(r, method)
            return f"{method} -> {r.path(method + '.ckpt')}"
        if args.cmd == "align-da":
            pipeline.run_align_da(r, args.distill)
            return f"align-da ({args.distill}) -> {r.path(pipeline.DA_OUTPUT[args.distill] + '.ckpt')}"
        if args.cmd == "align-ta":
            _, traces = pipeline.run_align_ta(r, args.round)
            return f"align-ta round {args.round}: final win_diff {traces[-1].win_diff:.6g}" if traces else ""
        if args.cmd == "sample":
            steps = cfg.eval.steps if args.steps is None else args.steps
            n = 16 if args.n is None else args.n
            return str(pipeline.run_sample(r, args.model, steps, n))
        if args.cmd == "eval":
            rep = pipeline.run_eval(r, args.model, args.steps, args.n)
            return (f"{args.model} steps={rep.steps} frechet={rep.frechet:.4f} "
                    f"defect={rep.consistency_defect:.4f} deviation={rep.endpoint_deviation:.4f}")
        if args.cmd == "sweep":
            reps = pipeline.run_sweep(r, args.model, args.n)
            return "\n".join(f"{args.model} steps={x.steps} frechet={x.frechet:.4f}" for x in reps)
        if args.cmd == "ablate":
            rows = pipeline.run_ablate(r, args.axis)
            return "\n".join(f"{row['sampler']}: frechet={row['frechet']:.4f}" for row in rows)
    raise AssertionError(args.cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    from .config import ConfigError
    from .numerics import NumericalError
    from .pipeline import LockHeldError, OutputExistsError, PrerequisiteError

    try:
        msg = run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OutputExistsError, LockHeldError) as e:
        print(f"refused: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except ValueError as e:
        print(f"invalid argument: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PREREQ
    if msg:
        print(msg)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
