"""Evaluation: Fréchet distance in a frozen feature space, consistency defect
along teacher trajectories, endpoint deviation and step sweeps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dist_align import FeatureNet
from .flow_core import Dataset, EulerSchedule, consistency_fn, euler_sample, euler_trajectory
from .numerics import DTYPE, stream

CLAMP = 1e-10


@dataclass
class FrechetStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def fit(cls, feats: np.ndarray) -> FrechetStats:
        feats = np.asarray(feats, dtype=DTYPE)
        if feats.ndim == 1:
            feats = feats[:, None]
        n = feats.shape[0]
        if n < 2:
            raise ValueError("need at least two samples to fit Fréchet statistics")
        cov = np.cov(feats, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        return cls(mean=feats.mean(axis=0), cov=0.5 * (cov + cov.T), n=n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.where(w < CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sum(np.sqrt(np.where(w < CLAMP, 0.0, w)))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(value, 0.0)


@dataclass
class MetricReport:
    frechet: float
    consistency_defect: float
    endpoint_deviation: float
    steps: int
    seed: int

    CSV_HEADER = ("steps", "seed", "frechet", "consistency_defect", "endpoint_deviation")

    def row(self) -> tuple:
        return (self.steps, self.seed, self.frechet, self.consistency_defect, self.endpoint_deviation)

    def as_dict(self) -> dict:
        return asdict(self)


class FrechetEvaluator:
    """Reference statistics of held-out real data in a fixed feature space."""

    def __init__(self, data: Dataset, feature_net: FeatureNet):
        self.data = data
        self.feature_net = feature_net
        self.frames = data.spec.frames
        self.real = FrechetStats.fit(self.embed(data.x0))

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.feature_net.embed_samples(x, self.frames)

    def score(self, samples: np.ndarray) -> float:
        return frechet_distance(FrechetStats.fit(self.embed(samples)), self.real)


def eval_feature_net(dim: int, seed: int) -> FeatureNet:
    """The metric's feature network; drawn from its own stream, separate from the discriminator's."""
    return FeatureNet(dim, rng=stream(seed, "eval_features"))


def shared_noise(n: int, dim: int, seed: int) -> np.ndarray:
    return stream(seed, "eval_noise").standard_normal((n, dim))


def generate(model, cond: np.ndarray, x1: np.ndarray, steps: int, chunk: int = 512) -> np.ndarray:
    out = np.empty_like(x1)
    for s in range(0, x1.shape[0], chunk):
        out[s:s + chunk] = euler_sample(model, x1[s:s + chunk], cond[s:s + chunk], steps)
    return out


def consistency_defect(student, teacher, data: Dataset, t1: float, t2: float, n: int,
                       seed: int = 0, ref_steps: int = 1024) -> float:
    """Mean ||f(x_t1, t1) - f(x_t2, t2)|| over teacher trajectories from shared noise."""
    if t1 == t2:
        return 0.0
    cond = data.cond[:n]
    x1 = shared_noise(n, data.x0.shape[1], seed)
    return _defect(student, euler_trajectory(teacher, x1, cond, ref_steps, (t1, t2)), t1, t2, cond)


def _defect(model, traj, t1, t2, cond) -> float:
    (g1, x_a), (g2, x_b) = traj[t1], traj[t2]
    f1 = consistency_fn(model, x_a, g1, cond)
    f2 = consistency_fn(model, x_b, g2, cond)
    return float(np.mean(np.linalg.norm(f1 - f2, axis=1)))


def endpoint_deviation(model, reference_model, schedule_a: EulerSchedule | int,
                       schedule_b: EulerSchedule | int, data: Dataset, n: int, seed: int = 0) -> float:
    """Mean ||sample(model, a) - sample(reference, b)|| with shared noise and conditions."""
    cond = data.cond[:n]
    x1 = shared_noise(n, data.x0.shape[1], seed)
    a = euler_sample(model, x1, cond, schedule_a)
    b = euler_sample(reference_model, x1, cond, schedule_b)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def step_sweep(model, evaluator: FrechetEvaluator, steps_list, seed: int, teacher,
               n: int | None = None, defect_times=(0.3, 0.9), ref_steps: int = 1024) -> list[MetricReport]:
    """Fréchet distance per step count with the same noise and conditions for every count.

    Endpoint deviation is measured against the teacher's ``ref_steps`` samples from
    the same noise; the consistency defect is a property of the model alone and
    is repeated on every row.
    """
    steps_list = list(steps_list)
    if not steps_list or steps_list != sorted(steps_list):
        raise ValueError(f"steps_list must be non-empty and ascending, got {steps_list}")
    data = evaluator.data
    n = len(data) if n is None else n
    cond = data.cond[:n]
    x1 = shared_noise(n, data.x0.shape[1], seed)
    t1, t2 = defect_times
    traj = euler_trajectory(teacher, x1, cond, ref_steps, (t1, t2, 0.0))
    reference = traj[0.0][1]
    defect = _defect(model, traj, t1, t2, cond)
    reports = []
    for steps in steps_list:
        samples = generate(model, cond, x1, steps)
        dev = float(np.mean(np.linalg.norm(samples - reference, axis=1)))
        reports.append(MetricReport(frechet=evaluator.score(samples), consistency_defect=defect,
                                    endpoint_deviation=dev, steps=steps, seed=seed))
    return reports
