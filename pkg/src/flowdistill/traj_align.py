"""Trajectory alignment: preference pairs from the model's own samplers at
two step counts, flow-DPO with a reflow regulariser, and the Win Diff
diagnostic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow_core import Dataset, TimestepSampler, euler_sample, interpolate
from .numerics import DTYPE, TrainState, VelocityNet, adamw_step, log_sigmoid, sigmoid
from .numerics.tensor import batch_times


@dataclass
class TaConfig:
    beta: float = 2500.0
    lambda_rf: float = 2.0
    steps_w: int = 8
    steps_l: int = 4
    dataset_size: int = 5000
    lr: float = 1e-4
    iters: int = 2000
    batch: int = 32
    sampler: TimestepSampler = field(default_factory=TimestepSampler)

    def validate(self) -> None:
        if not self.steps_w > self.steps_l >= 1:
            raise ValueError(
                f"need steps_w > steps_l >= 1, got steps_w={self.steps_w}, steps_l={self.steps_l}"
            )
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lambda_rf < 0:
            raise ValueError(f"lambda_rf must be non-negative, got {self.lambda_rf}")


@dataclass
class PreferenceSet:
    """Column store of preference pairs; ``x0_w`` comes from the larger step count."""

    cond: np.ndarray
    x0_w: np.ndarray
    x0_l: np.ndarray
    noise_seed: np.ndarray
    steps_w: int
    steps_l: int

    def __len__(self) -> int:
        return self.x0_w.shape[0]

    def __getitem__(self, i) -> PreferencePair:
        return PreferencePair(self.cond[i], self.x0_w[i], self.x0_l[i], int(self.noise_seed[i]))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "cond": self.cond,
            "x0_w": self.x0_w,
            "x0_l": self.x0_l,
            "noise_seed": self.noise_seed.astype(DTYPE),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> PreferenceSet:
        return cls(arrays["cond"], arrays["x0_w"], arrays["x0_l"],
                   arrays["noise_seed"].astype(np.int64), int(meta["steps_w"]), int(meta["steps_l"]))


@dataclass
class PreferencePair:
    cond: np.ndarray
    x0_w: np.ndarray
    x0_l: np.ndarray
    noise_seed: int


def pair_noise(seed: int, size: int) -> np.ndarray:
    return np.random.Generator(np.random.Philox(int(seed))).standard_normal(size)


def synthesize_preferences(model: VelocityNet, data: Dataset, cfg: TaConfig,
                           rng: np.random.Generator, chunk: int = 256) -> PreferenceSet:
    """For each drawn condition, sample once with ``steps_w`` and once with ``steps_l``
    from the same initial noise."""
    cfg.validate()
    n = cfg.dataset_size
    idx = rng.integers(0, len(data), size=n)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    cond = data.cond[idx]
    dim = data.x0.shape[1]
    x1 = np.stack([pair_noise(s, dim) for s in seeds])
    xw = np.empty_like(x1)
    xl = np.empty_like(x1)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        xw[sl] = euler_sample(model, x1[sl], cond[sl], cfg.steps_w)
        xl[sl] = euler_sample(model, x1[sl], cond[sl], cfg.steps_l)
    return PreferenceSet(cond, xw, xl, seeds.astype(np.int64), cfg.steps_w, cfg.steps_l)


def _errors(net: VelocityNet, x0, eps, t, cond):
    """Per-sample ||v - net(x_t, t)||^2 with v = eps - x0, plus what backward needs."""
    xt = interpolate(x0, eps, t)
    pred, cache = net.forward_cached(xt, t, cond)
    resid = pred - (eps - x0)
    return np.sum(resid * resid, axis=1), resid, cache


def _prep(pairs, t, eps):
    cond, xw, xl = (np.atleast_2d(a) for a in pairs)
    eps = np.atleast_2d(np.asarray(eps, dtype=DTYPE))
    t = batch_times(t, xw.shape[0])
    return cond, xw, xl, t, eps


def dpo_terms(student, ref, pairs, t, eps):
    cond, xw, xl, t, eps = _prep(pairs, t, eps)
    ew, rw, cw = _errors(student, xw, eps, t, cond)
    el, rl, cl = _errors(student, xl, eps, t, cond)
    ew_ref, _, _ = _errors(ref, xw, eps, t, cond)
    el_ref, _, _ = _errors(ref, xl, eps, t, cond)
    return (ew, rw, cw), (el, rl, cl), ew_ref, el_ref


def _combine(student, gw_scale, rw, cw, gl_scale, rl, cl):
    """Parameter gradients of sum_b gw_scale_b ||rw_b||^2 + gl_scale_b ||rl_b||^2."""
    gw, _ = student.backward(cw, 2.0 * gw_scale[:, None] * rw)
    gl, _ = student.backward(cl, 2.0 * gl_scale[:, None] * rl)
    return {k: gw[k] + gl[k] for k in gw}


def dpo_loss(student: VelocityNet, ref: VelocityNet, pairs, t, eps, beta: float, with_grad: bool = True):
    """Flow-DPO loss ``-mean log sigmoid(-beta/2 * [(e_w - e_w_ref) - (e_l - e_l_ref)])``.

    ``pairs`` is ``(cond, x0_w, x0_l)``; the w and l sides share ``t`` and ``eps``.
    """
    (ew, rw, cw), (el, rl, cl), ew_ref, el_ref = dpo_terms(student, ref, pairs, t, eps)
    inside = (ew - ew_ref) - (el - el_ref)
    z = -0.5 * beta * inside
    B = ew.shape[0]
    loss = float(-np.mean(log_sigmoid(z)))
    if not with_grad:
        return loss, None
    # d/dz[-log sigmoid(z)] = -sigmoid(-z);  dz/de_w = -beta/2, dz/de_l = +beta/2
    s = sigmoid(-z) / B
    grads = _combine(student, 0.5 * beta * s, rw, cw, -0.5 * beta * s, rl, cl)
    return loss, grads


def reflow_loss(student: VelocityNet, pairs, t, eps, with_grad: bool = True):
    """``mean_b ||v_w - F(x_t^w, t)||^2`` on the preferred samples."""
    cond, xw, _, t, eps = _prep(pairs, t, eps)
    ew, rw, cw = _errors(student, xw, eps, t, cond)
    B = ew.shape[0]
    loss = float(ew.mean())
    if not with_grad:
        return loss, None
    grads, _ = student.backward(cw, 2.0 * rw / B)
    return loss, grads


def ta_loss(student: VelocityNet, ref: VelocityNet, pairs, t, eps, cfg: TaConfig, with_grad: bool = True):
    """DPO loss plus ``lambda_rf`` times the reflow loss; returns (total, dpo, reflow, grads)."""
    ld, gd = dpo_loss(student, ref, pairs, t, eps, cfg.beta, with_grad)
    if cfg.lambda_rf == 0:
        return ld, ld, 0.0, gd
    lr_, gr = reflow_loss(student, pairs, t, eps, with_grad)
    total = ld + cfg.lambda_rf * lr_
    grads = None if gd is None else {k: gd[k] + cfg.lambda_rf * gr[k] for k in gd}
    return total, ld, lr_, grads


def win_diff(student: VelocityNet, ref: VelocityNet, pairs, t, eps) -> float:
    """Mean over the batch of e_w(student) - e_w(ref); negative means the student wins."""
    cond, xw, _, t, eps = _prep(pairs, t, eps)
    ew, _, _ = _errors(student, xw, eps, t, cond)
    ew_ref, _, _ = _errors(ref, xw, eps, t, cond)
    return float(np.mean(ew - ew_ref))


@dataclass
class TaTrace:
    iter: int
    loss: float
    dpo: float
    reflow: float
    win_diff: float

    CSV_HEADER = ("iter", "loss", "dpo", "reflow", "win_diff")

    def row(self) -> tuple:
        return (self.iter, self.loss, self.dpo, self.reflow, self.win_diff)


def ta_train_round(state: TrainState, ref: VelocityNet, prefs: PreferenceSet, cfg: TaConfig,
                   rng: np.random.Generator) -> list[TaTrace]:
    """Full-parameter fine-tune on ``ta_loss``; ``ref`` stays frozen.

    Win Diff is measured on each minibatch before that minibatch's update.
    """
    cfg.validate()
    student = VelocityNet(ref.cfg, state.theta)
    traces = []
    for it in range(cfg.iters):
        idx = rng.integers(0, len(prefs), size=cfg.batch)
        pairs = (prefs.cond[idx], prefs.x0_w[idx], prefs.x0_l[idx])
        eps = rng.standard_normal(prefs.x0_w[idx].shape)
        t = cfg.sampler.sample(rng, cfg.batch)
        wd = win_diff(student, ref, pairs, t, eps)
        total, ld, lr_, grads = ta_loss(student, ref, pairs, t, eps, cfg)
        adamw_step(state, grads, cfg.lr)
        state.iters += 1
        traces.append(TaTrace(it, total, ld, lr_, wd))
    return traces


def mean_pair_distance(prefs: PreferenceSet) -> float:
    return float(np.mean(np.linalg.norm(prefs.x0_w - prefs.x0_l, axis=1)))
