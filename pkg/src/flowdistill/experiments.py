"""Studies shared by the scripts and the acceptance tests.

Two families live here.  The Gaussian study trains an unconditional teacher on
2-D standard-normal data, where the exact velocity field is known, and then
distils it with CCD.  The toy-pipeline study runs every stage of the default
pipeline for one seed, skipping outputs that already exist, and collects the
step sweeps and Win Diff traces the ablations compare.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ccd import CcdConfig, ccd_train_step
from .config import ExperimentConfig
from .flow_core import DatasetSpec, TeacherConfig, gaussian_oracle_velocity, make_dataset, train_teacher
from .metrics import consistency_defect, endpoint_deviation
from .numerics import NetConfig, TrainState, VelocityNet, stream
from .pipeline import (
    Run,
    model_file,
    run_align_da,
    run_align_ta,
    run_distill,
    run_sweep,
    run_teacher,
)
from .traj_align import synthesize_preferences, ta_train_round

# ---------------------------------------------------------------------------
# 2-D Gaussian: teacher oracle and trajectory preservation


@dataclass
class GaussianStudyConfig:
    seed: int = 0
    train_size: int = 20000
    width: int = 64
    blocks: int = 2
    teacher: TeacherConfig = field(default_factory=lambda: TeacherConfig(iters=20000, lr=2e-3, batch=128))
    # unconditional 2-D data moves far less than the toy videos, so a larger lr is needed
    ccd: CcdConfig = field(default_factory=lambda: CcdConfig(lr=1e-4, total_iters=5000, warmup_H=1000))
    grid_points: int = 10
    grid_times: int = 10
    grid_extent: float = 2.0
    n_eval: int = 1000
    ref_steps: int = 1024
    defect_t1: float = 0.3
    defect_t2: float = 0.9

    @property
    def spec(self) -> DatasetSpec:
        return DatasetSpec(kind="gaussian", frames=1, dim=2, mean=0.0, scale=1.0, conditional=False,
                           seed=self.seed)


def gaussian_teacher(cfg: GaussianStudyConfig) -> VelocityNet:
    data = make_dataset(cfg.spec, cfg.train_size)
    net = VelocityNet.create(NetConfig(2, 0, cfg.width, cfg.blocks), stream(cfg.seed, "gaussian", "init"))
    teacher, _ = train_teacher(net, data, cfg.teacher, stream(cfg.seed, "gaussian", "teacher"))
    return teacher


def oracle_mse(model, cfg: GaussianStudyConfig) -> float:
    """Mean squared velocity error against the exact field on a grid of points and times."""
    g = np.linspace(-cfg.grid_extent, cfg.grid_extent, cfg.grid_points)
    x = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    cond = np.zeros((x.shape[0], 0))
    errs = []
    for t in np.linspace(0.05, 0.95, cfg.grid_times):
        diff = model(x, t, cond) - gaussian_oracle_velocity(x, t, 0.0, 1.0)
        errs.append(np.sum(diff ** 2, axis=1))
    return float(np.mean(errs))


def distill_gaussian(teacher: VelocityNet, cfg: GaussianStudyConfig) -> VelocityNet:
    data = make_dataset(cfg.spec, cfg.train_size)
    state = TrainState.from_params(teacher.params)
    rng = stream(cfg.seed, "gaussian", "ccd")
    for _ in range(cfg.ccd.total_iters):
        ccd_train_step(teacher, state, cfg.ccd, data, rng)
    return VelocityNet(teacher.cfg, state.theta)


def trajectory_study(cfg: GaussianStudyConfig) -> dict:
    """Oracle error of the teacher, then 1-step deviation and defect before and after CCD."""
    teacher = gaussian_teacher(cfg)
    student = distill_gaussian(teacher, cfg)
    ev = make_dataset(cfg.spec, cfg.n_eval, "eval")
    t1, t2, n, ref = cfg.defect_t1, cfg.defect_t2, cfg.n_eval, cfg.ref_steps
    return {
        "oracle_mse": oracle_mse(teacher, cfg),
        "teacher_1step_deviation": endpoint_deviation(teacher, teacher, 1, ref, ev, n),
        "student_1step_deviation": endpoint_deviation(student, teacher, 1, ref, ev, n),
        "defect_init": consistency_defect(teacher, teacher, ev, t1, t2, n, ref_steps=ref),
        "defect_final": consistency_defect(student, teacher, ev, t1, t2, n, ref_steps=ref),
    }


# ---------------------------------------------------------------------------
# toy pipeline, one seed

SWEPT = ("ccd", "dcd", "da", "da_dcd", "da_only", "ta_round1", "ta_round2")


def _timed(timings: dict, key: str, fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    timings[key] = time.perf_counter() - t0
    return out


def run_seed(cfg: ExperimentConfig, out_dir, n_eval: int | None = None) -> dict:
    """Every stage and sweep for one seed; stages whose outputs exist are skipped.

    Stage wall-clock times of this invocation are merged into ``timings.json``.
    """
    run = Run(cfg, out_dir)
    run.dir.mkdir(parents=True, exist_ok=True)
    timings_path = run.path("timings.json")
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    stages = [
        ("teacher.ckpt", "train-teacher", run_teacher, ()),
        ("ccd.ckpt", "distill-ccd", run_distill, ("ccd",)),
        ("dcd.ckpt", "distill-dcd", run_distill, ("dcd",)),
        ("da.ckpt", "align-da", run_align_da, ("ccd",)),
        ("da_dcd.ckpt", "align-da-dcd", run_align_da, ("dcd",)),
        ("da_only.ckpt", "align-da-none", run_align_da, ("none",)),
    ] + [(f"ta_round{r}.ckpt", f"align-ta-{r}", run_align_ta, (r,)) for r in range(1, len(cfg.ta_rounds) + 1)]
    with run.lock():
        for name, key, fn, args in stages:
            if not run.path(name).exists():
                _timed(timings, key, fn, run, *args)
        for model in SWEPT:
            if run.path(model_file(model)).exists() and not run.path(f"sweep_{model}.csv").exists():
                run_sweep(run, model, n_eval)
        timings_path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return timings


def read_sweep(out_dir, model: str) -> dict[int, float]:
    with open(Path(out_dir) / f"sweep_{model}.csv", newline="") as fh:
        return {int(r["steps"]): float(r["frechet"]) for r in csv.DictReader(fh)}


def read_win_diff(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["win_diff"]) for r in csv.DictReader(fh)])


def final_quartile(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.mean(values[-max(1, len(values) // 4):]))


def win_diff_study(cfg: ExperimentConfig, out_dir, lambda_rf: float) -> np.ndarray:
    """Round-1 Win Diff trace from the DA model with the given reflow weight.

    Preferences and minibatches use the same streams as the pipeline's round 1,
    so the only difference between two calls is the reflow weight.  The trace
    is cached as ``win_diff_lrf{lambda_rf}.csv``.
    """
    run = Run(cfg, out_dir)
    path = run.path(f"win_diff_lrf{lambda_rf:g}.csv")
    if path.exists():
        return read_win_diff(path)
    ref = run.load_model("da").copy()
    steps_w, steps_l = cfg.ta_rounds[0]
    ta_cfg = dataclasses.replace(cfg.ta_round(steps_w, steps_l), lambda_rf=lambda_rf)
    prefs = synthesize_preferences(ref, run.data, ta_cfg, stream(run.seed, "ta", 1, "prefs"))
    state = TrainState.from_params(ref.params)
    traces = ta_train_round(state, ref, prefs, ta_cfg, stream(run.seed, "ta", 1, "train"))
    run.write_csv(path.name, traces[0].CSV_HEADER, (t.row() for t in traces))
    return np.array([t.win_diff for t in traces])


def seed_summary(out_dir) -> dict:
    """Per-model step sweeps of one finished seed directory."""
    return {m: read_sweep(out_dir, m) for m in SWEPT if (Path(out_dir) / f"sweep_{m}.csv").exists()}


def paired_margin(better, worse) -> tuple[float, float, int]:
    """Mean and sample std of the per-seed gap ``worse - better`` and the count of seeds where it is positive."""
    d = np.asarray(worse, dtype=float) - np.asarray(better, dtype=float)
    sd = float(np.std(d, ddof=1)) if d.size > 1 else 0.0
    return float(np.mean(d)), sd, int(np.sum(d > 0))
