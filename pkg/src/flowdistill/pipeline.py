"""Stage runners shared by the command line, the experiment scripts and the tests.

A run directory holds everything one seed of one config produces::

    teacher.ckpt            ccd.ckpt  ccd_warm.ckpt  dcd.ckpt  dcd_warm.ckpt
    da.ckpt  da_dcd.ckpt  da_only.ckpt               ta_round{r}.ckpt  prefs_round{r}.ckpt
    *_trace.csv             per-iteration training logs
    eval_<model>.csv/json   sweep_<model>.csv/json   ablate_t_sampler.csv/json

Checkpoints carry no timestamps, so identical configs and seeds give
byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as config_mod
from .ccd import ccd_train_step, dcd_train_step
from .config import ExperimentConfig
from .dist_align import DaTrace, Discriminator, DiscState, FeatureNet, da_train_step, init_heads
from .flow_core import Dataset, TimestepSampler, make_dataset, train_teacher
from .metrics import FrechetEvaluator, MetricReport, eval_feature_net, generate, step_sweep
from .numerics import NetConfig, TrainState, VelocityNet, stream
from .numerics import checkpoint as ckpt
from .traj_align import PreferenceSet, TaTrace, mean_pair_distance, synthesize_preferences, ta_train_round


class PrerequisiteError(RuntimeError):
    """A stage input is missing; the message names the absent file."""


class OutputExistsError(RuntimeError):
    pass


class LockHeldError(RuntimeError):
    pass


# model name -> checkpoint file
MODELS = {
    "teacher": "teacher.ckpt",
    "ccd": "ccd.ckpt",
    "dcd": "dcd.ckpt",
    "da": "da.ckpt",
    "da_dcd": "da_dcd.ckpt",
    "da_only": "da_only.ckpt",
}
DA_OUTPUT = {"ccd": "da", "dcd": "da_dcd", "none": "da_only"}


def ta_model(round_idx: int) -> str:
    return f"ta_round{round_idx}"


def model_file(name: str) -> str:
    if name in MODELS:
        return MODELS[name]
    if name.startswith("ta_round") and name[len("ta_round"):].isdigit():
        return name + ".ckpt"
    raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODELS)} or ta_round<r>")


# ---------------------------------------------------------------------------
# state <-> checkpoint


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v]
        return int(v) if isinstance(v, (np.integer, bool)) else v

    return plain(st)


def _restore_rng(state: dict) -> np.random.Generator:
    st = json.loads(json.dumps(state))
    st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    bg = np.random.Philox()
    bg.state = st
    return np.random.Generator(bg)


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for group, params in (("theta", state.theta), ("ema", state.theta_ema), ("m", state.m), ("v", state.v)):
        for k in sorted(params):
            out[f"{group}/{k}"] = params[k]
    return out


def state_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> TrainState:
    groups: dict[str, dict] = {"theta": {}, "ema": {}, "m": {}, "v": {}}
    for name, arr in arrays.items():
        g, _, k = name.partition("/")
        if g in groups:
            groups[g][k] = arr.copy()
    return TrainState(theta=groups["theta"], theta_ema=groups["ema"], m=groups["m"], v=groups["v"],
                      adam_steps=int(meta["adam_steps"]), iters=int(meta["iters"]))


# ---------------------------------------------------------------------------
# run directory


class Run:
    """One output directory for one config; lazily builds datasets and evaluators."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None, force: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.dir = Path(out_dir if out_dir is not None else cfg.output_dir)
        self.force = force
        self._data: Dataset | None = None
        self._eval: FrechetEvaluator | None = None

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def net_cfg(self) -> NetConfig:
        spec = self.cfg.dataset
        return NetConfig(spec.sample_dim, spec.cond_dim, self.cfg.net.width, self.cfg.net.blocks)

    def path(self, name: str) -> Path:
        return self.dir / name

    @property
    def data(self) -> Dataset:
        if self._data is None:
            self._data = make_dataset(self.cfg.dataset, self.cfg.train_size, "train")
        return self._data

    @property
    def evaluator(self) -> FrechetEvaluator:
        if self._eval is None:
            spec = self.cfg.dataset
            ev = make_dataset(spec, self.cfg.eval.n_eval, "eval")
            self._eval = FrechetEvaluator(ev, eval_feature_net(spec.dim, spec.seed))
        return self._eval

    # -- guards ---------------------------------------------------------

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PrerequisiteError(f"missing prerequisite checkpoint {p}")
        return p

    def claim(self, *names: str) -> None:
        """Refuse to overwrite existing outputs unless forced."""
        if self.force:
            return
        existing = [n for n in names if self.path(n).exists()]
        if existing:
            raise OutputExistsError(
                f"outputs already exist in {self.dir}: {', '.join(existing)} (pass --force to overwrite)"
            )

    @contextmanager
    def lock(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        lock_path = self.path(".lock")
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeldError(f"{lock_path} exists; another stage is writing to {self.dir}") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock_path.unlink(missing_ok=True)

    # -- io -------------------------------------------------------------

    def meta(self, stage: str, **extra) -> dict:
        # output_dir is where a run lives, not what it computes; leaving it out
        # keeps checkpoints byte-identical across directories.
        cfg = config_mod.to_dict(self.cfg)
        cfg.pop("output_dir")
        return {"stage": stage, "seed": self.seed, "config": cfg, **extra}

    def save_state(self, name: str, state: TrainState, stage: str, **extra) -> Path:
        meta = self.meta(stage, adam_steps=state.adam_steps, iters=state.iters, **extra)
        return ckpt.save(self.path(name), state_arrays(state), meta)

    def load_state(self, name: str) -> tuple[TrainState, dict]:
        arrays, meta = ckpt.load(self.require(name))
        return state_from_arrays(arrays, meta), meta

    def load_model(self, name: str) -> VelocityNet:
        state, _ = self.load_state(model_file(name))
        params = state.theta if self.cfg.deploy == "theta" or name == "teacher" else state.theta_ema
        return VelocityNet(self.net_cfg, params)

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# stages


def run_teacher(run: Run) -> VelocityNet:
    cfg = run.cfg
    run.claim("teacher.ckpt", "teacher_trace.csv")
    net = VelocityNet.create(run.net_cfg, stream(run.seed, "teacher", "init"))
    teacher, losses = train_teacher(net, run.data, cfg.teacher, stream(run.seed, "teacher", "train"))
    state = TrainState.from_params(teacher.params)
    state.iters = cfg.teacher.iters
    run.save_state("teacher.ckpt", state, "train-teacher")
    run.write_csv("teacher_trace.csv", ("iter", "loss"), enumerate(losses))
    return teacher


def run_distill(run: Run, method: str = "ccd") -> TrainState:
    """CCD or DCD from the teacher; also snapshots the state at the DA warmup boundary."""
    if method not in ("ccd", "dcd"):
        raise ValueError(f"unknown distillation method {method!r}")
    cfg = run.cfg
    warm = f"{method}_warm.ckpt"
    run.claim(f"{method}.ckpt", warm, f"{method}_trace.csv")
    teacher = run.load_model("teacher")
    state = TrainState.from_params(teacher.params)
    rng = stream(run.seed, method)
    step = ccd_train_step if method == "ccd" else dcd_train_step
    traces = []
    for it in range(cfg.ccd.total_iters):
        if it == cfg.da.n_warmup:
            run.save_state(warm, state, f"distill-{method}", rng=_rng_state(rng))
        traces.append(step(teacher, state, cfg.ccd, run.data, rng))
    run.save_state(f"{method}.ckpt", state, f"distill-{method}")
    run.write_csv(f"{method}_trace.csv", traces[0].CSV_HEADER if traces else ("iter",),
                  (t.row() for t in traces))
    return state


def make_discriminator(run: Run) -> DiscState:
    cfg, spec = run.cfg, run.cfg.dataset
    K = cfg.da.features
    feat = FeatureNet(spec.dim, K, rng=stream(run.seed, "disc", "features"))
    heads = init_heads(K, K if spec.conditional else 0, spec.frames, cfg.da.head_hidden,
                       rng=stream(run.seed, "disc", "heads"))
    return DiscState(Discriminator(feat, spec.frames, heads))


def train_da(cfg: ExperimentConfig, teacher: VelocityNet, data: Dataset, dstate: DiscState,
             state: TrainState, rng: np.random.Generator, distill: str) -> list[DaTrace]:
    traces = []
    while state.iters < cfg.ccd.total_iters:
        traces.append(da_train_step(teacher, state, dstate, cfg.ccd, cfg.da, data, rng, distill=distill))
    return traces


def run_align_da(run: Run, distill: str = "ccd") -> TrainState:
    """Distillation with distribution alignment switched on after the warmup.

    For ``ccd``/``dcd`` the run resumes from the snapshot the matching
    distillation stage wrote at the warmup boundary, so the total iteration
    count matches the distillation-only run.
    """
    if distill not in DA_OUTPUT:
        raise ValueError(f"unknown distillation term {distill!r}; expected one of {sorted(DA_OUTPUT)}")
    cfg = run.cfg
    out = DA_OUTPUT[distill]
    run.claim(f"{out}.ckpt", f"{out}_trace.csv")
    teacher = run.load_model("teacher")
    if distill == "none" or cfg.da.n_warmup == 0 or cfg.da.n_warmup >= cfg.ccd.total_iters:
        state = TrainState.from_params(teacher.params)
        rng = stream(run.seed, distill)
    else:
        arrays, meta = ckpt.load(run.require(f"{distill}_warm.ckpt"))
        state = state_from_arrays(arrays, meta)
        rng = _restore_rng(meta["rng"])
    dstate = make_discriminator(run)
    traces = train_da(cfg, teacher, run.data, dstate, state, rng, distill)
    run.save_state(f"{out}.ckpt", state, "align-da", distill=distill)
    ckpt.save(run.path(f"{out}_disc.ckpt"), dict(sorted(dstate.disc.heads.items())),
              run.meta("align-da", distill=distill, feature_hash=dstate.disc.feature_net.param_hash()))
    run.write_csv(f"{out}_trace.csv", DaTrace.CSV_HEADER, (t.row() for t in traces))
    return state


def run_align_ta(run: Run, round_idx: int = 1) -> tuple[TrainState, list[TaTrace]]:
    """One trajectory-alignment round; round 1 starts from the DA model, round r from round r-1."""
    cfg = run.cfg
    if not 1 <= round_idx <= len(cfg.ta_rounds):
        raise ValueError(f"round must lie in 1..{len(cfg.ta_rounds)}, got {round_idx}")
    name = ta_model(round_idx)
    prefs_name = f"prefs_round{round_idx}.ckpt"
    run.claim(f"{name}.ckpt", prefs_name, f"{name}_trace.csv")
    source = "da" if round_idx == 1 else ta_model(round_idx - 1)
    run.require(model_file(source))
    ref = run.load_model(source).copy()
    steps_w, steps_l = cfg.ta_rounds[round_idx - 1]
    ta_cfg = cfg.ta_round(steps_w, steps_l)
    prefs = synthesize_preferences(ref, run.data, ta_cfg, stream(run.seed, "ta", round_idx, "prefs"))
    ckpt.save(run.path(prefs_name), prefs.arrays(),
              run.meta("align-ta", round=round_idx, steps_w=steps_w, steps_l=steps_l,
                       mean_pair_distance=mean_pair_distance(prefs)))
    state = TrainState.from_params(ref.params)
    traces = ta_train_round(state, ref, prefs, ta_cfg, stream(run.seed, "ta", round_idx, "train"))
    run.save_state(f"{name}.ckpt", state, "align-ta", round=round_idx, source=source)
    run.write_csv(f"{name}_trace.csv", TaTrace.CSV_HEADER, (t.row() for t in traces))
    return state, traces


def load_preferences(run: Run, round_idx: int) -> PreferenceSet:
    arrays, meta = ckpt.load(run.require(f"prefs_round{round_idx}.ckpt"))
    return PreferenceSet.from_arrays(arrays, meta)


def run_sample(run: Run, model: str, steps: int, n: int) -> Path:
    name = f"samples_{model}_s{steps}_n{n}.ckpt"
    run.claim(name)
    net = run.load_model(model)
    ev = run.evaluator.data
    idx = np.arange(n) % len(ev)
    cond = ev.cond[idx]
    x1 = stream(run.seed, "sample").standard_normal((n, run.net_cfg.in_dim))
    x0 = generate(net, cond, x1, steps)
    return ckpt.save(run.path(name), {"x0": x0, "cond": cond, "x1": x1},
                     run.meta("sample", model=model, steps=steps, n=n))


def _reports_out(run: Run, stem: str, reports: list[MetricReport], **extra) -> list[MetricReport]:
    run.write_csv(f"{stem}.csv", MetricReport.CSV_HEADER, (r.row() for r in reports))
    run.write_json(f"{stem}.json", {"reports": [r.as_dict() for r in reports], **extra})
    return reports


def run_eval(run: Run, model: str, steps: int | None = None, n: int | None = None) -> MetricReport:
    steps = run.cfg.eval.steps if steps is None else steps
    run.claim(f"eval_{model}.csv", f"eval_{model}.json")
    reports = _sweep(run, run.load_model(model), [steps], n)
    _reports_out(run, f"eval_{model}", reports, model=model)
    return reports[0]


def _sweep(run: Run, net: VelocityNet, steps_list, n=None) -> list[MetricReport]:
    e = run.cfg.eval
    return step_sweep(net, run.evaluator, steps_list, run.seed, run.load_model("teacher"),
                      n=n, defect_times=(e.defect_t1, e.defect_t2), ref_steps=e.ref_steps)


def run_sweep(run: Run, model: str, n: int | None = None) -> list[MetricReport]:
    run.claim(f"sweep_{model}.csv", f"sweep_{model}.json")
    reports = _sweep(run, run.load_model(model), run.cfg.eval.steps_list, n)
    return _reports_out(run, f"sweep_{model}", reports, model=model)


T_SAMPLER_ROWS = (
    ("uniform", TimestepSampler("uniform")),
    ("lognorm(-0.8,1.0)", TimestepSampler("logit_normal", -0.8, 1.0)),
    ("lognorm(-0.6,1.4)", TimestepSampler("logit_normal", -0.6, 1.4)),
)


def run_ablate(run: Run, axis: str = "t_sampler") -> list[dict]:
    """CCD+DA from the teacher under each timestep sampler, scored at the eval step count."""
    if axis != "t_sampler":
        raise ValueError(f"unknown ablation axis {axis!r}; supported: t_sampler")
    run.claim(f"ablate_{axis}.csv", f"ablate_{axis}.json")
    teacher = run.load_model("teacher")
    steps = run.cfg.eval.steps
    rows = []
    for label, sampler in T_SAMPLER_ROWS:
        cfg = dataclasses.replace(run.cfg, ccd=dataclasses.replace(run.cfg.ccd, sampler=sampler))
        state = TrainState.from_params(teacher.params)
        train_da(cfg, teacher, run.data, make_discriminator(run), state,
                 stream(run.seed, "ablate", label), "ccd")
        params = state.theta if cfg.deploy == "theta" else state.theta_ema
        rep = _sweep(run, VelocityNet(run.net_cfg, params), [steps])[0]
        rows.append({"sampler": label, "kind": sampler.kind, "p_mean": sampler.p_mean,
                     "p_std": sampler.p_std, "steps": steps, "frechet": rep.frechet})
    header = ("sampler", "kind", "p_mean", "p_std", "steps", "frechet")
    run.write_csv(f"ablate_{axis}.csv", header, ([r[k] for k in header] for r in rows))
    run.write_json(f"ablate_{axis}.json", {"axis": axis, "rows": rows})
    return rows


# ---------------------------------------------------------------------------
# plot data


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_plotdata(run_dir: str | os.PathLike) -> list[Path]:
    """Tidy CSVs for external plotting: step sweeps, Win Diff traces, loss curves.

    Writes ``plot_step_sweep.csv`` (one row per model, seed and step count),
    ``plot_win_diff.csv`` (one row per TA iteration) and ``plot_losses.csv``
    (long format: source, iter, metric, value).  Output depends only on the
    metric files, so re-exporting is byte-identical.
    """
    d = Path(run_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"run directory {d} does not exist")
    sweeps = sorted(d.glob("sweep_*.csv"))
    ta = sorted(d.glob("ta_round*_trace.csv"), key=lambda p: int(p.stem[len("ta_round"):-len("_trace")]))
    losses = sorted(p for p in d.glob("*_trace.csv"))
    if not (sweeps or ta or losses):
        raise FileNotFoundError(f"no metrics CSVs in {d}")
    written = []

    def write(name, header, rows):
        p = d / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(p)

    if sweeps:
        rows = []
        for p in sweeps:
            model = p.stem[len("sweep_"):]
            for r in _read_csv(p):
                rows.append([model, r["seed"], r["steps"], r["frechet"], r["consistency_defect"],
                             r["endpoint_deviation"]])
        write("plot_step_sweep.csv",
              ("model", "seed", "steps", "frechet", "consistency_defect", "endpoint_deviation"), rows)
    if ta:
        rows = []
        for p in ta:
            rnd = p.stem[len("ta_round"):-len("_trace")]
            rows.extend([rnd, r["iter"], r["win_diff"]] for r in _read_csv(p))
        write("plot_win_diff.csv", ("round", "iter", "win_diff"), rows)
    if losses:
        rows = []
        for p in losses:
            source = p.stem[:-len("_trace")]
            for r in _read_csv(p):
                for k, v in r.items():
                    if k != "iter":
                        rows.append([source, r["iter"], k, v])
        write("plot_losses.csv", ("source", "iter", "metric", "value"), rows)
    return written
