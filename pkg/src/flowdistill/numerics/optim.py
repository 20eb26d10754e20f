"""Training state, AdamW and the EMA shadow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import Params
from .tensor import NumericalError, ShapeError


def clone(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainState:
    theta: Params
    theta_ema: Params
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    adam_steps: int = 0
    iters: int = 0

    @classmethod
    def from_params(cls, params: Params) -> TrainState:
        theta = clone(params)
        return cls(
            theta=theta,
            theta_ema=clone(params),
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def copy(self) -> TrainState:
        return TrainState(
            clone(self.theta), clone(self.theta_ema), clone(self.m), clone(self.v),
            self.adam_steps, self.iters,
        )


def adamw_step(
    state: TrainState,
    grads: Params,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> TrainState:
    """Decoupled weight-decay Adam on ``state.theta``; the EMA copy is untouched.

    Validation happens before any mutation, so a bad gradient leaves the
    state exactly as it was.
    """
    for name, p in state.theta.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name}")
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape}, parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")

    step = state.adam_steps + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for name, p in state.theta.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update
    state.adam_steps = step
    return state


def ema_update(state: TrainState, mu: float) -> TrainState:
    """theta_ema <- mu * theta_ema + (1 - mu) * theta.

    Written as a step toward theta so a shadow equal to theta stays bit-exact.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"EMA rate must lie in [0, 1], got {mu}")
    for name, shadow in state.theta_ema.items():
        if mu == 1.0:
            continue
        if mu == 0.0:
            shadow[...] = state.theta[name]
            continue
        shadow += (1.0 - mu) * (state.theta[name] - shadow)
    return state
