"""Adversarial distribution alignment against real data.

A frozen random feature network embeds every frame; light discriminator
heads score single frames (spatial) and adjacent frame pairs (temporal).
Spatial heads share one set of weights across positions, temporal heads
share one set across pairs, and both see the embedded condition frame.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .ccd import (
    CcdConfig,
    apply_update,
    ccd_gradients,
    dcd_draw,
    dcd_gradients,
    draw_batch,
)
from .flow_core import Dataset, consistency_fn
from .numerics import DTYPE, TrainState, VelocityNet, adamw_step, silu
from .numerics.tensor import ShapeError, batch_times, silu_with_grad

Params = dict[str, np.ndarray]


class FeatureNet:
    """Frozen two-layer map frame [D] -> feature [K]."""

    def __init__(self, dim: int, features: int = 32, hidden: int = 64, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.features = dim, features
        self._params = {
            "A1": rng.uniform(-1, 1, size=(dim, hidden)) * np.sqrt(6.0 / dim),
            "a1": rng.uniform(-0.5, 0.5, size=hidden),
            "A2": rng.uniform(-1, 1, size=(hidden, features)) * np.sqrt(3.0 / hidden),
            "a2": np.zeros(features),
        }
        for p in self._params.values():
            p.setflags(write=False)
        self._hash = self.param_hash()

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(self._params[k].tobytes())
        return h.hexdigest()

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(frames)
        return out

    def forward_cached(self, frames: np.ndarray):
        p = self._params
        pre = frames @ p["A1"] + p["a1"]
        act, dact = silu_with_grad(pre)
        return act @ p["A2"] + p["a2"], dact

    def backward_input(self, dact: np.ndarray, gout: np.ndarray) -> np.ndarray:
        p = self._params
        return ((gout @ p["A2"].T) * dact) @ p["A1"].T

    def embed_samples(self, x: np.ndarray, frames: int) -> np.ndarray:
        """Flattened samples [B, F*D] -> concatenated per-frame features [B, F*K]."""
        x = np.atleast_2d(x)
        return self(x.reshape(x.shape[0], frames, self.dim)).reshape(x.shape[0], -1)


def init_heads(features: int, cond_features: int, frames: int, hidden: int = 32,
               rng: np.random.Generator | None = None, zero: bool = False) -> Params:
    rng = rng if rng is not None else np.random.default_rng(0)

    def u(shape, fan_in, gain):
        if zero:
            return np.zeros(shape, dtype=DTYPE)
        return rng.uniform(-1, 1, size=shape) * np.sqrt(gain / max(fan_in, 1))

    heads: Params = {}
    for kind, width, count in (("spatial", features, frames), ("temporal", 2 * features, frames - 1)):
        fan = width + cond_features
        heads[f"{kind}.U"] = u((width, hidden), fan, 6.0)
        heads[f"{kind}.V"] = u((cond_features, hidden), fan, 6.0)
        heads[f"{kind}.b"] = np.zeros(hidden)
        heads[f"{kind}.pos"] = np.zeros((max(count, 0), hidden))
        heads[f"{kind}.w"] = u((hidden,), hidden, 3.0)
        heads[f"{kind}.c"] = np.zeros(1)
    return heads


@dataclass
class Discriminator:
    feature_net: FeatureNet
    frames: int
    heads: Params

    def __post_init__(self):
        if self.frames < 2:
            raise ShapeError("temporal heads need at least two frames per sample")

    @property
    def n_heads(self) -> int:
        return 2 * self.frames - 1

    def _features(self, x, cond):
        x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
        B = x.shape[0]
        fr = x.reshape(B, self.frames, self.feature_net.dim)
        feats, dact = self.feature_net.forward_cached(fr)
        cond = np.atleast_2d(np.asarray(cond, dtype=DTYPE))
        if cond.shape[0] != B:
            cond = np.broadcast_to(cond, (B, cond.shape[1]))
        cfeat = self.feature_net(cond) if cond.shape[1] else np.zeros((B, 0))
        return feats, dact, cfeat

    def _head(self, kind, inp, cfeat):
        h = self.heads
        pre = inp @ h[f"{kind}.U"] + (cfeat @ h[f"{kind}.V"])[:, None, :] + h[f"{kind}.b"] + h[f"{kind}.pos"]
        act, dact = silu_with_grad(pre)
        return act @ h[f"{kind}.w"] + h[f"{kind}.c"][0], (inp, act, dact)

    def logits(self, x, cond, cache: bool = False):
        """Per-head logits, shape [B, F + (F - 1)]: spatial heads first, then temporal."""
        feats, fdact, cfeat = self._features(x, cond)
        pairs = np.concatenate([feats[:, :-1, :], feats[:, 1:, :]], axis=2)
        s, scache = self._head("spatial", feats, cfeat)
        tl, tcache = self._head("temporal", pairs, cfeat)
        out = np.concatenate([s, tl], axis=1)
        if cache:
            return out, (fdact, cfeat, scache, tcache)
        return out

    def backward(self, cache, gl: np.ndarray, want_input: bool = True):
        """Gradients of ``sum(gl * logits)`` w.r.t. head parameters and the input sample."""
        fdact, cfeat, scache, tcache = cache
        F = self.frames
        grads: Params = {}
        gfeat = np.zeros((gl.shape[0], F, self.feature_net.features))
        for kind, g, (inp, act, dact) in (("spatial", gl[:, :F], scache), ("temporal", gl[:, F:], tcache)):
            h = self.heads
            grads[f"{kind}.w"] = np.einsum("bn,bnh->h", g, act)
            grads[f"{kind}.c"] = np.array([g.sum()])
            gpre = g[:, :, None] * h[f"{kind}.w"] * dact
            grads[f"{kind}.U"] = np.einsum("bni,bnh->ih", inp, gpre)
            grads[f"{kind}.V"] = cfeat.T @ gpre.sum(axis=1)
            grads[f"{kind}.b"] = gpre.sum(axis=(0, 1))
            grads[f"{kind}.pos"] = gpre.sum(axis=0)
            if want_input:
                ginp = gpre @ h[f"{kind}.U"].T
                if kind == "spatial":
                    gfeat += ginp
                else:
                    K = self.feature_net.features
                    gfeat[:, :-1, :] += ginp[:, :, :K]
                    gfeat[:, 1:, :] += ginp[:, :, K:]
        gx = None
        if want_input:
            gx = self.feature_net.backward_input(fdact, gfeat).reshape(gl.shape[0], -1)
        return grads, gx


@dataclass
class DaConfig:
    lambda_adv: float = 0.01
    n_warmup: int = 1000
    disc_lr: float = 1e-4
    disc_beta1: float = 0.5
    disc_beta2: float = 0.999
    features: int = 32
    head_hidden: int = 32

    def validate(self) -> None:
        if not self.lambda_adv >= 0:
            raise ValueError(f"lambda_adv must be non-negative, got {self.lambda_adv}")
        if self.n_warmup < 0:
            raise ValueError(f"n_warmup must be non-negative, got {self.n_warmup}")


def predict_x0_hat(student, x_t, t, cond) -> np.ndarray:
    return consistency_fn(student, x_t, t, cond)


def disc_logits(disc: Discriminator, x, cond) -> np.ndarray:
    return disc.logits(x, cond)


def d_loss(disc: Discriminator, real, fake, cond, with_grad: bool = True):
    """Hinge loss summed over heads, averaged over the batch; gradients for the heads only."""
    real = np.atleast_2d(real)
    B = real.shape[0]
    lr_, cr = disc.logits(real, cond, cache=True)
    lf, cf = disc.logits(fake, cond, cache=True)
    mr = np.maximum(0.0, 1.0 - lr_)
    mf = np.maximum(0.0, 1.0 + lf)
    loss = float((mr.sum() + mf.sum()) / B)
    if not with_grad:
        return loss, None
    gr, _ = disc.backward(cr, -(1.0 - lr_ > 0).astype(DTYPE) / B, want_input=False)
    gf, _ = disc.backward(cf, (1.0 + lf > 0).astype(DTYPE) / B, want_input=False)
    return loss, {k: gr[k] + gf[k] for k in gr}


def g_adv_loss(disc: Discriminator, fake, cond):
    """Generator hinge term ``mean_b sum_k max(0, 1 - D_k(fake))`` and its gradient w.r.t. ``fake``."""
    fake = np.atleast_2d(fake)
    B = fake.shape[0]
    lf, cache = disc.logits(fake, cond, cache=True)
    loss = float(np.maximum(0.0, 1.0 - lf).sum() / B)
    _, gx = disc.backward(cache, -(1.0 - lf > 0).astype(DTYPE) / B)
    return loss, gx


def g_adv_student_grads(student: VelocityNet, disc: Discriminator, x_t, t, cond):
    """Adversarial loss on x0_hat = x_t - t F(x_t, t) and its gradient w.r.t. the student."""
    x_t = np.atleast_2d(x_t)
    t = batch_times(t, x_t.shape[0])
    pred, cache = student.forward_cached(x_t, t, cond)
    fake = x_t - t[:, None] * pred
    loss, gfake = g_adv_loss(disc, fake, cond)
    grads, _ = student.backward(cache, -t[:, None] * gfake)
    return loss, grads


@dataclass
class DaTrace:
    iter: int
    d_loss: float
    g_adv_loss: float
    distill_loss: float
    active: bool

    CSV_HEADER = ("iter", "d_loss", "g_adv_loss", "distill_loss", "active_flag")

    def row(self) -> tuple:
        return (self.iter, self.d_loss, self.g_adv_loss, self.distill_loss, int(self.active))


class DiscState:
    """Head parameters plus their AdamW moments."""

    def __init__(self, disc: Discriminator):
        self.disc = disc
        self.opt = TrainState.from_params(disc.heads)
        disc.heads = self.opt.theta


def da_train_step(teacher: VelocityNet, state: TrainState, dstate: DiscState, ccd_cfg: CcdConfig,
                  da_cfg: DaConfig, data: Dataset, rng: np.random.Generator,
                  distill: str = "ccd") -> DaTrace:
    """One alternating step: discriminator update, then generator update.

    ``distill`` picks the trajectory term paired with the adversarial term:
    "ccd", "dcd" or "none".  Before ``n_warmup`` iterations the step is the
    plain distillation step and consumes the RNG identically.
    """
    it = state.iters
    active = it >= da_cfg.n_warmup
    if distill == "dcd":
        x0, cond, _, t, x_t = dcd_draw(data, ccd_cfg, rng, ccd_cfg.dcd_delta_t)
    else:
        x0, cond, _, t, x_t = draw_batch(data, ccd_cfg.sampler, ccd_cfg.batch, rng)

    dl = ga = float("nan")
    adv_grads = None
    if active:
        student = VelocityNet(teacher.cfg, state.theta)
        fake = predict_x0_hat(student, x_t, t, cond)
        dl, hgrads = d_loss(dstate.disc, x0, fake, cond)
        adamw_step(dstate.opt, hgrads, da_cfg.disc_lr, da_cfg.disc_beta1, da_cfg.disc_beta2)
        dstate.opt.iters += 1
        ga, adv_grads = g_adv_student_grads(student, dstate.disc, x_t, t, cond)

    if distill == "ccd":
        distill_loss, grads, _, _ = ccd_gradients(teacher, state, ccd_cfg, cond, t, x_t)
    elif distill == "dcd":
        distill_loss, grads = dcd_gradients(teacher, state, cond, t, x_t, ccd_cfg.dcd_delta_t)
    elif distill == "none":
        distill_loss = 0.0
        grads = {k: np.zeros_like(v) for k, v in state.theta.items()}
    else:
        raise ValueError(f"unknown distillation term {distill!r}")

    if adv_grads is not None:
        grads = {k: grads[k] + da_cfg.lambda_adv * adv_grads[k] for k in grads}
    apply_update(state, grads, ccd_cfg)
    return DaTrace(iter=it, d_loss=dl, g_adv_loss=ga, distill_loss=distill_loss, active=active)
