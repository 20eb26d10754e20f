"""Rectified-flow basics: toy data, interpolation, flow-matching loss, Euler
sampling, the consistency parameterization, timestep samplers and the
closed-form velocity for Gaussian data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DTYPE,
    NumericalError,
    ShapeError,
    TrainState,
    VelocityNet,
    adamw_step,
    sigmoid,
    stream,
)
from .numerics.tensor import batch_times

T_EPS = 1e-5
DATASET_CHUNK = 256
DATASET_KINDS = ("gaussian", "gaussian_mixture", "moving_blob")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSpec:
    kind: str = "gaussian_mixture"
    frames: int = 8
    dim: int = 4
    mean: float = 0.0
    scale: float = 0.25
    n_components: int = 4
    spread: float = 0.3
    weights: list[float] | None = None
    drift: float = 0.8
    blob_width: float = 0.8
    conditional: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.frames < 1 or self.dim < 1:
            raise ValueError(f"frames and dim must be positive, got F={self.frames}, D={self.dim}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.kind == "gaussian_mixture":
            if self.n_components < 1:
                raise ValueError("n_components must be >= 1")
            if not self.spread > 0:
                raise ValueError(f"spread must be > 0, got {self.spread}")
            w = self.mixture_weights()
            if len(w) != self.n_components:
                raise ValueError(f"{len(w)} mixture weights for {self.n_components} components")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"mixture weights must be non-negative and sum to 1, got {list(w)}")
        if self.kind == "moving_blob" and not self.blob_width > 0:
            raise ValueError(f"blob_width must be > 0, got {self.blob_width}")

    @property
    def sample_dim(self) -> int:
        return self.frames * self.dim

    @property
    def cond_dim(self) -> int:
        return self.dim if self.conditional else 0

    def mixture_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n_components, 1.0 / self.n_components)
        return np.asarray(self.weights, dtype=DTYPE)

    def mixture_means(self) -> np.ndarray:
        """Component means, shape [K, F, D]: a random start point moving linearly."""
        rng = stream(self.seed, "dataset", "mixture_means")
        start = rng.normal(0.0, self.spread, size=(self.n_components, 1, self.dim))
        velocity = rng.normal(0.0, self.drift, size=(self.n_components, 1, self.dim))
        steps = np.arange(self.frames, dtype=DTYPE)[None, :, None]
        return self.mean + start + steps * velocity


@dataclass
class ToySample:
    cond: np.ndarray
    frames: np.ndarray


@dataclass
class Dataset:
    """Column store of ``n`` samples; indexing yields :class:`ToySample`."""

    spec: DatasetSpec
    cond: np.ndarray      # [n, cond_dim]
    frames: np.ndarray    # [n, F, D]
    component: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, i: int) -> ToySample:
        return ToySample(cond=self.cond[i], frames=self.frames[i])

    @property
    def x0(self) -> np.ndarray:
        return self.frames.reshape(len(self), -1)

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.x0[idx], self.cond[idx]


def _generate_chunk(spec: DatasetSpec, rng: np.random.Generator, n: int):
    F, D = spec.frames, spec.dim
    comp = np.zeros(n, dtype=np.int64)
    if spec.kind == "gaussian":
        frames = spec.mean + spec.scale * rng.standard_normal((n, F, D))
    elif spec.kind == "gaussian_mixture":
        means = spec.mixture_means()
        comp = rng.choice(spec.n_components, size=n, p=spec.mixture_weights())
        frames = means[comp] + spec.scale * rng.standard_normal((n, F, D))
    else:
        pos0 = rng.uniform(0.0, D - 1.0, size=n)
        direction = rng.choice([-1.0, 1.0], size=n)
        amp = spec.mean + spec.scale * np.abs(rng.standard_normal(n)) + 0.5
        pos = pos0[:, None] + direction[:, None] * spec.drift * np.arange(F)[None, :]
        pixels = np.arange(D, dtype=DTYPE)
        frames = amp[:, None, None] * np.exp(
            -((pixels[None, None, :] - pos[:, :, None]) ** 2) / (2.0 * spec.blob_width**2)
        )
    return frames.astype(DTYPE), comp


def make_dataset(spec: DatasetSpec, n: int, stream_name: str = "train") -> Dataset:
    """Draw ``n`` samples; chunks of 256 use independent derived streams."""
    spec.validate()
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    frames, comps = [], []
    for chunk, start in enumerate(range(0, n, DATASET_CHUNK)):
        rng = stream(spec.seed, "dataset", stream_name, chunk)
        f, c = _generate_chunk(spec, rng, min(DATASET_CHUNK, n - start))
        frames.append(f)
        comps.append(c)
    frames = np.concatenate(frames)
    cond = frames[:, 0, :].copy() if spec.conditional else np.zeros((n, 0), dtype=DTYPE)
    return Dataset(spec=spec, cond=cond, frames=frames, component=np.concatenate(comps))


def gaussian_moments(spec: DatasetSpec, cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and variance of x0 given cond, for ``kind == "gaussian"``.

    The first frame is pinned to the condition when the data is conditional.
    """
    if spec.kind != "gaussian":
        raise ValueError("closed-form moments exist only for the gaussian dataset kind")
    cond = np.atleast_2d(cond)
    n = cond.shape[0]
    mean = np.full((n, spec.frames, spec.dim), float(spec.mean))
    var = np.full((n, spec.frames, spec.dim), float(spec.scale) ** 2)
    if spec.conditional:
        mean[:, 0, :] = cond
        var[:, 0, :] = 0.0
    return mean.reshape(n, -1), var.reshape(n, -1)


# ---------------------------------------------------------------------------
# interpolation, loss, oracle


def interpolate(x0, x1, t) -> np.ndarray:
    x0 = np.asarray(x0, dtype=DTYPE)
    x1 = np.asarray(x1, dtype=DTYPE)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: x0 shape {x0.shape} != x1 shape {x1.shape}")
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def fm_loss(net: VelocityNet, x0, cond, x1, t, with_grad: bool = True):
    """Flow-matching loss ``mean_b ||(x1 - x0) - F(x_t, t, cond)||^2``.

    Returns ``(loss, grads)``; ``grads`` is None when ``with_grad`` is False.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=DTYPE))
    if x0.shape[0] == 0:
        raise ValueError("fm_loss: empty batch")
    x1 = np.atleast_2d(np.asarray(x1, dtype=DTYPE))
    t = batch_times(t, x0.shape[0])
    xt = interpolate(x0, x1, t)
    pred, cache = net.forward_cached(xt, t, cond)
    resid = pred - (x1 - x0)
    B = x0.shape[0]
    loss = float(np.sum(resid * resid) / B)
    if not with_grad:
        return loss, None
    grads, _ = net.backward(cache, 2.0 * resid / B)
    return loss, grads


def gaussian_oracle_velocity(x, t, mean0, var0) -> np.ndarray:
    """Exact E[x1 - x0 | x_t = x] for x0 ~ N(mean0, var0) and x1 ~ N(0, 1) per coordinate.

    With a = 1 - t: x_t has mean a*m and variance a^2 s + t^2; the velocity has
    mean -m, and Cov(x_t, x1 - x0) = t - a s.  Gaussian conditioning gives
    -m + (t - a s) / (a^2 s + t^2) * (x - a m).
    """
    x = np.asarray(x, dtype=DTYPE)
    mean0 = np.broadcast_to(np.asarray(mean0, dtype=DTYPE), x.shape)
    var0 = np.broadcast_to(np.asarray(var0, dtype=DTYPE), x.shape)
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim == 1 and x.ndim == 2:
        t = t[:, None]
    t = np.broadcast_to(t, x.shape)
    a = 1.0 - t
    var_xt = a * a * var0 + t * t
    if np.any(var_xt <= 0.0):
        raise ValueError("singular conditioning: x_t is deterministic (t = 0 with zero data variance)")
    return -mean0 + (t - a * var0) / var_xt * (x - a * mean0)


# ---------------------------------------------------------------------------
# timesteps and sampling


@dataclass
class TimestepSampler:
    kind: str = "logit_normal"
    p_mean: float = -0.6
    p_std: float = 1.4

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal"):
            raise ValueError(f"sampler kind must be uniform or logit_normal, got {self.kind!r}")
        if not self.p_std > 0:
            raise ValueError(f"p_std must be positive, got {self.p_std}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(T_EPS, 1.0 - T_EPS, size=size)
        z = rng.normal(self.p_mean, self.p_std, size=size)
        return np.clip(sigmoid(z), T_EPS, 1.0 - T_EPS)


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator) -> float:
    return float(sampler.sample(rng, 1)[0])


@dataclass(frozen=True)
class EulerSchedule:
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"Euler schedule needs at least one step, got {self.steps}")

    @property
    def times(self) -> np.ndarray:
        times = np.linspace(1.0, 0.0, self.steps + 1)
        times[0], times[-1] = 1.0, 0.0
        return times


def euler_sample(net, x1, cond, schedule: EulerSchedule | int) -> np.ndarray:
    """Integrate dx/dt = F from t=1 down to t=0 with uniform Euler steps."""
    if isinstance(schedule, int):
        schedule = EulerSchedule(schedule)
    times = schedule.times
    x = np.array(x1, dtype=DTYPE, copy=True)
    for k in range(schedule.steps):
        t_now, t_next = times[k], times[k + 1]
        x = x - (t_now - t_next) * net(x, t_now, cond)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"Euler sampling produced non-finite state at step {k}")
    return x


def euler_trajectory(net, x1, cond, steps: int, keep) -> dict[float, tuple[float, np.ndarray]]:
    """Map each requested time to ``(grid_time, state)`` at the nearest Euler grid point."""
    times = EulerSchedule(steps).times
    wanted = {float(t): int(np.argmin(np.abs(times - t))) for t in keep}
    out = {}
    x = np.array(x1, dtype=DTYPE, copy=True)
    for k in range(steps + 1):
        for t, idx in wanted.items():
            if idx == k:
                out[t] = (float(times[k]), x.copy())
        if k == steps:
            break
        x = x - (times[k] - times[k + 1]) * net(x, times[k], cond)
    return out


def consistency_fn(net, x_t, t, cond) -> np.ndarray:
    """f(x_t, t) = x_t - t * F(x_t, t, cond); equals x_t exactly at t = 0."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    t_arr = np.asarray(t, dtype=DTYPE)
    tcol = t_arr[:, None] if (t_arr.ndim == 1 and x_t.ndim == 2) else t_arr
    return x_t - tcol * net(x_t, t, cond)


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherConfig:
    iters: int = 6000
    lr: float = 2e-3
    batch: int = 128
    sampler: TimestepSampler = field(default_factory=lambda: TimestepSampler("uniform"))
    lr_decay: bool = True


def train_teacher(net: VelocityNet, data: Dataset, cfg: TeacherConfig, rng: np.random.Generator,
                  log_every: int = 0, callback=None):
    """Plain flow matching with AdamW; linear learning-rate decay to zero when enabled.

    Returns the trained network and the list of per-iteration losses.
    """
    state = TrainState.from_params(net.params)
    model = net.with_params(state.theta)
    losses = []
    for it in range(cfg.iters):
        idx = rng.integers(0, len(data), size=cfg.batch)
        x0, cond = data.batch(idx)
        x1 = rng.standard_normal(x0.shape)
        t = cfg.sampler.sample(rng, cfg.batch)
        loss, grads = fm_loss(model, x0, cond, x1, t)
        lr = cfg.lr * (1.0 - it / cfg.iters) if cfg.lr_decay else cfg.lr
        adamw_step(state, grads, lr)
        state.iters += 1
        losses.append(loss)
        if callback is not None and log_every and (it + 1) % log_every == 0:
            callback(it + 1, loss)
    return net.with_params(state.theta), losses
