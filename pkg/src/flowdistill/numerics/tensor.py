"""Array conventions shared by every module.

Tensors are plain ``numpy.ndarray`` objects with dtype float64.  Batched
quantities carry the batch on axis 0; a single sample is a flat vector of
length ``F * D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an input does not have the expected shape."""


class NumericalError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{name} contains non-finite entries")
    return x


def check_last_dim(x: np.ndarray, size: int, name: str) -> None:
    if x.ndim == 0 or x.shape[-1] != size:
        got = x.shape[-1] if x.ndim else "scalar"
        raise ShapeError(f"{name}: last dimension is {got}, expected {size}")


def batch_times(t, batch: int) -> np.ndarray:
    """Broadcast a scalar or per-sample time to shape ``[batch]``."""
    t = np.asarray(t, dtype=DTYPE)
    if t.ndim == 0:
        return np.full(batch, float(t))
    if t.shape != (batch,):
        raise ShapeError(f"t: shape {t.shape} does not match batch size {batch}")
    return t


@dataclass
class DualTensor:
    """A value together with its directional derivative."""

    value: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.tangent.shape:
            raise ShapeError(
                f"dual tensor shape mismatch: value {self.value.shape} vs tangent {self.tangent.shape}"
            )

    def __add__(self, other: DualTensor) -> DualTensor:
        return DualTensor(self.value + other.value, self.tangent + other.tangent)

    def matmul(self, weight: np.ndarray, bias: np.ndarray | None = None) -> DualTensor:
        value = self.value @ weight
        if bias is not None:
            value = value + bias
        return DualTensor(value, self.tangent @ weight)

    def silu(self) -> DualTensor:
        value, deriv = silu_with_grad(self.value)
        return DualTensor(value, deriv * self.tangent)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_with_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = sigmoid(x)
    return x * s, s * (1.0 + x * (1.0 - s))


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log(sigmoid(x)) = -softplus(-x), stable for large |x|
    return -np.logaddexp(0.0, -x)
