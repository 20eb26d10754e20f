"""Block-structured velocity network with hand-written derivatives.

Layout (row-vector convention, ``y = x @ W + b``)::

    temb = phi(t) @ Wt + bt                 phi: 16 sin/cos frequency pairs
    c    = cond @ Wc + bc
    h    = x @ Win + bin
    for each block:
        z = h + temb + c
        h = h + silu(z @ W1 + b1) @ W2 + b2
    y    = h @ Wout + bout

Three derivative routes are provided: reverse mode (``backward``) for
training, block-wise forward mode (``jvp_blockwise``) for the time
derivative along the flow, and plain evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DTYPE,
    DualTensor,
    NumericalError,
    ShapeError,
    batch_times,
    check_finite,
    check_last_dim,
    silu_with_grad,
)

Params = dict[str, np.ndarray]

TIME_FREQS = np.geomspace(0.25, 8.0, 16)


@dataclass(frozen=True)
class NetConfig:
    in_dim: int
    cond_dim: int
    width: int = 64
    blocks: int = 2

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError(f"blocks must be >= 2, got {self.blocks}")
        if self.in_dim < 1 or self.width < 1 or self.cond_dim < 0:
            raise ValueError(f"invalid network dimensions: {self}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        w = self.width
        shapes = {
            "time.W": (2 * len(TIME_FREQS), w),
            "time.b": (w,),
            "input.W": (self.in_dim, w),
            "input.b": (w,),
            "cond.W": (self.cond_dim, w),
            "cond.b": (w,),
        }
        for i in range(self.blocks):
            shapes[f"block{i}.W1"] = (w, w)
            shapes[f"block{i}.b1"] = (w,)
            shapes[f"block{i}.W2"] = (w, w)
            shapes[f"block{i}.b2"] = (w,)
        shapes["output.W"] = (w, self.in_dim)
        shapes["output.b"] = (self.in_dim,)
        return shapes


def time_features(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoidal features of ``t`` (shape [B]) and their derivative in t."""
    arg = t[:, None] * TIME_FREQS[None, :]
    feats = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    dfeats = np.concatenate(
        [TIME_FREQS * np.cos(arg), -TIME_FREQS * np.sin(arg)], axis=1
    )
    return feats, dfeats


def init_params(cfg: NetConfig, rng: np.random.Generator, zero_output: bool = True) -> Params:
    """Fan-in scaled uniform weights, zero biases.

    Layers feeding a SiLU use the He bound sqrt(6/fan_in); purely linear maps
    use sqrt(3/fan_in).  Residual branch outputs are further scaled by
    1/sqrt(blocks) so the stack stays well conditioned as depth grows.
    """
    params: Params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape, dtype=DTYPE)
            continue
        fan_in = max(shape[0], 1)
        bound = np.sqrt((6.0 if name.endswith(".W1") else 3.0) / fan_in)
        if name.endswith(".W2"):
            bound /= np.sqrt(cfg.blocks)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    if zero_output:
        params["output.W"][:] = 0.0
    return params


@dataclass
class ForwardCache:
    x: np.ndarray
    cond: np.ndarray
    phi: np.ndarray
    hs: list = field(default_factory=list)  # block inputs, then final hidden
    zs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    acts: list = field(default_factory=list)
    dacts: list = field(default_factory=list)
    squeeze: bool = False


class VelocityNet:
    """``F(x, t, cond)``: predicted velocity with the same shape as ``x``."""

    def __init__(self, cfg: NetConfig, params: Params):
        shapes = cfg.param_shapes()
        if set(shapes) != set(params):
            missing = sorted(set(shapes) ^ set(params))
            raise ShapeError(f"parameter names do not match architecture: {missing}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: NetConfig, rng: np.random.Generator, zero_output: bool = True) -> VelocityNet:
        return cls(cfg, init_params(cfg, rng, zero_output=zero_output))

    def with_params(self, params: Params) -> VelocityNet:
        return VelocityNet(self.cfg, params)

    def copy(self) -> VelocityNet:
        return VelocityNet(self.cfg, {k: v.copy() for k, v in self.params.items()})

    # -- input handling -------------------------------------------------

    def _prepare(self, x, t, cond):
        x = np.asarray(x, dtype=DTYPE)
        cond = np.asarray(cond, dtype=DTYPE)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2:
            raise ShapeError(f"x: expected [B, {self.cfg.in_dim}], got {x.shape}")
        check_last_dim(x, self.cfg.in_dim, "x")
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (x.shape[0], cond.shape[0]))
        check_last_dim(cond, self.cfg.cond_dim, "cond")
        if cond.shape[0] != x.shape[0]:
            raise ShapeError(f"cond: batch {cond.shape[0]} does not match x batch {x.shape[0]}")
        return x, batch_times(t, x.shape[0]), cond, squeeze

    # -- evaluation -----------------------------------------------------

    def forward(self, x, t, cond) -> np.ndarray:
        y, _ = self.forward_cached(x, t, cond)
        return y

    __call__ = forward

    def forward_cached(self, x, t, cond) -> tuple[np.ndarray, ForwardCache]:
        p = self.params
        x, t, cond, squeeze = self._prepare(x, t, cond)
        phi, _ = time_features(t)
        temb = phi @ p["time.W"] + p["time.b"]
        c = cond @ p["cond.W"] + p["cond.b"]
        h = x @ p["input.W"] + p["input.b"]
        cache = ForwardCache(x=x, cond=cond, phi=phi, squeeze=squeeze)
        inject = temb + c
        for i in range(self.cfg.blocks):
            cache.hs.append(h)
            z = h + inject
            a = z @ p[f"block{i}.W1"] + p[f"block{i}.b1"]
            s, ds = silu_with_grad(a)
            h = h + (s @ p[f"block{i}.W2"] + p[f"block{i}.b2"])
            cache.zs.append(z)
            cache.acts.append(s)
            cache.dacts.append(ds)
        cache.hs.append(h)
        y = h @ p["output.W"] + p["output.b"]
        check_finite(y, "network output")
        return (y[0] if squeeze else y), cache

    def backward(self, cache: ForwardCache, upstream) -> tuple[Params, np.ndarray]:
        """Gradients of ``sum(upstream * F)`` w.r.t. parameters and ``x``."""
        p = self.params
        gy = np.asarray(upstream, dtype=DTYPE)
        if cache.squeeze and gy.ndim == 1:
            gy = gy[None, :]
        if gy.shape != (cache.x.shape[0], self.cfg.in_dim):
            raise ShapeError(f"upstream: shape {gy.shape}, expected {(cache.x.shape[0], self.cfg.in_dim)}")
        grads: Params = {}
        h_last = cache.hs[-1]
        grads["output.W"] = h_last.T @ gy
        grads["output.b"] = gy.sum(axis=0)
        dh = gy @ p["output.W"].T
        dinject = np.zeros_like(dh)
        for i in reversed(range(self.cfg.blocks)):
            s, ds, z = cache.acts[i], cache.dacts[i], cache.zs[i]
            grads[f"block{i}.W2"] = s.T @ dh
            grads[f"block{i}.b2"] = dh.sum(axis=0)
            da = (dh @ p[f"block{i}.W2"].T) * ds
            grads[f"block{i}.W1"] = z.T @ da
            grads[f"block{i}.b1"] = da.sum(axis=0)
            dz = da @ p[f"block{i}.W1"].T
            dh = dh + dz
            dinject += dz
        grads["time.W"] = cache.phi.T @ dinject
        grads["time.b"] = dinject.sum(axis=0)
        grads["cond.W"] = cache.cond.T @ dinject
        grads["cond.b"] = dinject.sum(axis=0)
        grads["input.W"] = cache.x.T @ dh
        grads["input.b"] = dh.sum(axis=0)
        dx = dh @ p["input.W"].T
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        if cache.squeeze:
            dx = dx[0]
        return grads, dx

    def jvp_blockwise(self, x, t, cond, v_x, v_t=1.0) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(F, dF)`` with ``dF = dF/dx . v_x + dF/dt . v_t``.

        The (value, tangent) pair is pushed through the time embedding, the
        input embedding, each residual block in turn, and the output layer.
        Only one block's intermediates are alive at a time and nothing is
        recorded for reverse mode, so the result is a constant w.r.t. the
        parameters.
        """
        p = self.params
        x, t, cond, squeeze = self._prepare(x, t, cond)
        v_x = np.asarray(v_x, dtype=DTYPE)
        if squeeze and v_x.ndim == 1:
            v_x = v_x[None, :]
        if v_x.shape != x.shape:
            raise ShapeError(f"tangent v_x: shape {v_x.shape}, expected {x.shape}")
        v_t = batch_times(v_t, x.shape[0])

        phi, dphi = time_features(t)
        temb = DualTensor(phi, dphi * v_t[:, None]).matmul(p["time.W"], p["time.b"])
        c = cond @ p["cond.W"] + p["cond.b"]
        inject = DualTensor(temb.value + c, temb.tangent)

        h = DualTensor(x, v_x).matmul(p["input.W"], p["input.b"])
        for i in range(self.cfg.blocks):
            branch = (h + inject).matmul(p[f"block{i}.W1"], p[f"block{i}.b1"]).silu()
            h = h + branch.matmul(p[f"block{i}.W2"], p[f"block{i}.b2"])
        y = h.matmul(p["output.W"], p["output.b"])
        check_finite(y.tangent, "JVP tangent")
        if squeeze:
            return y.value[0], y.tangent[0]
        return y.value, y.tangent


def param_count(params: Params) -> int:
    return sum(v.size for v in params.values())


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in sorted(params)])


def unflatten_params(flat: np.ndarray, like: Params) -> Params:
    out: Params = {}
    offset = 0
    for k in sorted(like):
        n = like[k].size
        out[k] = flat[offset:offset + n].reshape(like[k].shape).copy()
        offset += n
    return out
