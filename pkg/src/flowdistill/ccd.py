"""Continuous-time consistency distillation, its discrete-time baseline and
the average-velocity identity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow_core import Dataset, TimestepSampler, consistency_fn, interpolate
from .numerics import DTYPE, TrainState, VelocityNet, adamw_step, ema_update
from .numerics.tensor import batch_times


@dataclass
class CcdConfig:
    warmup_H: int = 1000
    ema_mu: float = 0.95
    norm_c: float = 0.1
    lr: float = 1e-4
    sampler: TimestepSampler = field(default_factory=TimestepSampler)
    total_iters: int = 3000
    batch: int = 32
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    dcd_delta_t: float = 0.05

    def validate(self) -> None:
        if not self.norm_c > 0:
            raise ValueError(f"norm_c must be > 0, got {self.norm_c}")
        if self.warmup_H < 1:
            raise ValueError(f"warmup_H must be a positive integer, got {self.warmup_H}")
        if self.warmup_H > self.total_iters:
            raise ValueError(f"warmup_H ({self.warmup_H}) exceeds total_iters ({self.total_iters})")
        if not 0.0 <= self.ema_mu <= 1.0:
            raise ValueError(f"ema_mu must lie in [0, 1], got {self.ema_mu}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")


@dataclass
class CcdBatchTrace:
    iter: int
    t: float
    r: float
    raw_tangent_norm: float
    loss: float

    CSV_HEADER = ("iter", "t", "r", "raw_tangent_norm", "loss")

    def row(self) -> tuple:
        return (self.iter, self.t, self.r, self.raw_tangent_norm, self.loss)


def warmup_coefficient(iters: int, H: int) -> float:
    if H <= 0:
        raise ValueError(f"warmup horizon must be positive, got {H}")
    return min(1.0, iters / H)


def _tcol(t: np.ndarray) -> np.ndarray:
    return t[:, None]


def ccd_tangent(teacher: VelocityNet, student_ema: VelocityNet, x_t, t, cond, r: float,
                return_parts: bool = False):
    """Raw distillation target dx/dt - F_ema - r * t * dF_ema/dt.

    dx/dt comes from the teacher; dF_ema/dt is the block-wise JVP of the EMA
    network along (dx/dt, 1) and is treated as a constant.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"warmup coefficient must lie in [0, 1], got {r}")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    t = batch_times(t, x_t.shape[0])
    dxdt = teacher(x_t, t, cond)
    f_ema, df_ema = student_ema.jvp_blockwise(x_t, t, cond, dxdt, 1.0)
    g = dxdt - f_ema - r * _tcol(t) * df_ema
    if return_parts:
        return g, f_ema, dxdt, df_ema
    return g


def tangent_normalize(g, c: float) -> np.ndarray:
    """Scale each sample's tangent by 1 / (||g|| + c)."""
    if not c > 0:
        raise ValueError(f"normalization constant must be > 0, got {c}")
    g = np.asarray(g, dtype=DTYPE)
    if g.ndim == 1:
        return g / (np.linalg.norm(g) + c)
    norms = np.linalg.norm(g.reshape(g.shape[0], -1), axis=1)
    return g / (norms + c).reshape((-1,) + (1,) * (g.ndim - 1))


def ccd_loss(student: VelocityNet, student_ema: VelocityNet, x_t, t, cond, g,
             f_ema: np.ndarray | None = None, with_grad: bool = True):
    """``mean_b ||F_theta - F_ema - g||^2``; gradient w.r.t. the student only."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    t = batch_times(t, x_t.shape[0])
    if f_ema is None:
        f_ema = student_ema(x_t, t, cond)
    pred, cache = student.forward_cached(x_t, t, cond)
    resid = pred - f_ema - g
    B = x_t.shape[0]
    loss = float(np.sum(resid * resid) / B)
    if not with_grad:
        return loss, None
    grads, _ = student.backward(cache, 2.0 * resid / B)
    return loss, grads


def draw_batch(data: Dataset, sampler: TimestepSampler, batch: int, rng: np.random.Generator):
    """One training draw: (x0, cond, x1, t, x_t), always consuming the RNG in this order."""
    idx = rng.integers(0, len(data), size=batch)
    x0, cond = data.batch(idx)
    x1 = rng.standard_normal(x0.shape)
    t = sampler.sample(rng, batch)
    return x0, cond, x1, t, interpolate(x0, x1, t)


def ccd_gradients(teacher: VelocityNet, state: TrainState, cfg: CcdConfig, cond, t, x_t):
    """Loss, gradients and diagnostics of one CCD evaluation at the given points."""
    student = VelocityNet(teacher.cfg, state.theta)
    ema = VelocityNet(teacher.cfg, state.theta_ema)
    r = warmup_coefficient(state.iters, cfg.warmup_H)
    g, f_ema, _, _ = ccd_tangent(teacher, ema, x_t, t, cond, r, return_parts=True)
    raw_norm = float(np.mean(np.linalg.norm(g, axis=1)))
    g = tangent_normalize(g, cfg.norm_c)
    loss, grads = ccd_loss(student, ema, x_t, t, cond, g, f_ema=f_ema)
    return loss, grads, r, raw_norm


def apply_update(state: TrainState, grads, cfg: CcdConfig) -> None:
    adamw_step(state, grads, cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay)
    ema_update(state, cfg.ema_mu)
    state.iters += 1


def ccd_train_step(teacher: VelocityNet, state: TrainState, cfg: CcdConfig, data: Dataset,
                   rng: np.random.Generator) -> CcdBatchTrace:
    """One iteration of continuous-time consistency distillation (mutates ``state``)."""
    _, cond, _, t, x_t = draw_batch(data, cfg.sampler, cfg.batch, rng)
    it = state.iters
    loss, grads, r, raw_norm = ccd_gradients(teacher, state, cfg, cond, t, x_t)
    apply_update(state, grads, cfg)
    return CcdBatchTrace(iter=it, t=float(np.mean(t)), r=r, raw_tangent_norm=raw_norm, loss=loss)


def dcd_target(teacher: VelocityNet, ema: VelocityNet, x_t, t, cond, delta_t: float) -> np.ndarray:
    """f_ema at the preceding point reached by one teacher Euler step of size delta_t."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    t = batch_times(t, x_t.shape[0])
    x_prev = x_t - delta_t * teacher(x_t, t, cond)
    return consistency_fn(ema, x_prev, t - delta_t, cond)


def dcd_loss(student: VelocityNet, x_t, t, cond, target, with_grad: bool = True):
    """``mean_b ||f_theta(x_t, t) - target||^2`` with unit weighting."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    t = batch_times(t, x_t.shape[0])
    pred, cache = student.forward_cached(x_t, t, cond)
    resid = x_t - _tcol(t) * pred - target
    B = x_t.shape[0]
    loss = float(np.sum(resid * resid) / B)
    if not with_grad:
        return loss, None
    grads, _ = student.backward(cache, -2.0 * _tcol(t) * resid / B)
    return loss, grads


def dcd_draw(data: Dataset, cfg: CcdConfig, rng: np.random.Generator, delta_t: float):
    x0, cond, x1, t, _ = draw_batch(data, cfg.sampler, cfg.batch, rng)
    bad = t <= delta_t
    while np.any(bad):
        t[bad] = cfg.sampler.sample(rng, int(bad.sum()))
        bad = t <= delta_t
    return x0, cond, x1, t, interpolate(x0, x1, t)


def dcd_gradients(teacher: VelocityNet, state: TrainState, cond, t, x_t, delta_t: float):
    student = VelocityNet(teacher.cfg, state.theta)
    ema = VelocityNet(teacher.cfg, state.theta_ema)
    target = dcd_target(teacher, ema, x_t, t, cond, delta_t)
    return dcd_loss(student, x_t, t, cond, target)


def dcd_train_step(teacher: VelocityNet, state: TrainState, cfg: CcdConfig, data: Dataset,
                   rng: np.random.Generator, delta_t: float | None = None) -> CcdBatchTrace:
    """One iteration of discrete-time consistency distillation.

    Timesteps not exceeding ``delta_t`` are redrawn from the sampler.
    """
    delta_t = cfg.dcd_delta_t if delta_t is None else delta_t
    if not 0.0 < delta_t < 1.0:
        raise ValueError(f"delta_t must lie in (0, 1), got {delta_t}")
    _, cond, _, t, x_t = dcd_draw(data, cfg, rng, delta_t)
    it = state.iters
    loss, grads = dcd_gradients(teacher, state, cond, t, x_t, delta_t)
    apply_update(state, grads, cfg)
    return CcdBatchTrace(iter=it, t=float(np.mean(t)), r=1.0, raw_tangent_norm=float("nan"), loss=loss)


def meanflow_identity_target(teacher: VelocityNet, student: VelocityNet, x_t, t, cond) -> np.ndarray:
    """dx/dt - t * dF/dt along the teacher flow, with F read as the average velocity on [0, t]."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    t = batch_times(t, x_t.shape[0])
    dxdt = teacher(x_t, t, cond)
    _, dF = student.jvp_blockwise(x_t, t, cond, dxdt, 1.0)
    return dxdt - _tcol(t) * dF
