"""Dense 2-D float64 kernel: forward ops paired with exact analytic backward ops.

Everything above this module (cells, dense layers, heads) composes these
primitives by hand; there is no autodiff tape. A "matrix" is a 2-D float64
numpy array throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

Matrix = np.ndarray

EWISE_OPS = ("add", "sub", "mul")
ACTIVATIONS = ("sigmoid", "tanh", "relu", "leaky_relu", "softmax_rows", "identity")

DEFAULT_LEAKY_SLOPE = 0.05


def matrix(values) -> Matrix:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    out = np.asarray(values, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={out.ndim}")
    return out


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


class Param:
    """A value matrix paired with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = matrix(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Param(shape={self.value.shape})"


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = matrix(a)
    b = matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(d_out: Matrix, a: Matrix, b: Matrix):
    """Gradients of c = a @ b: dA = dC @ B^T, dB = A^T @ dC."""
    return d_out @ b.T, a.T @ d_out


def _check_ewise_shapes(a: Matrix, b: Matrix) -> bool:
    """Return True when b broadcasts as a one-row bias over a."""
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise DimensionError(f"elementwise shapes {a.shape} and {b.shape} are incompatible")


def ewise(op: str, a: Matrix, b: Matrix) -> Matrix:
    a = matrix(a)
    b = matrix(b)
    _check_ewise_shapes(a, b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def ewise_backward(op: str, d_out: Matrix, a: Matrix, b: Matrix):
    """Gradients of ewise(op, a, b); db is reduced over rows for a bias row b."""
    broadcast = _check_ewise_shapes(a, b)
    if op == "add":
        da, db = d_out, d_out
    elif op == "sub":
        da, db = d_out, -d_out
    elif op == "mul":
        da, db = d_out * b, d_out * a
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    if broadcast:
        db = db.sum(axis=0, keepdims=True)
    return da.copy() if da is d_out else da, db


def activate(kind: str, x: Matrix, alpha: float = DEFAULT_LEAKY_SLOPE) -> Matrix:
    x = matrix(x)
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite input to activation {kind!r}")
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0.0, x, alpha * x)
    if kind == "softmax_rows":
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(
    kind: str,
    d_out: Matrix,
    x: Matrix | None = None,
    out: Matrix | None = None,
    alpha: float = DEFAULT_LEAKY_SLOPE,
) -> Matrix:
    """Chain d_out through the analytic derivative of the activation.

    sigmoid/tanh/softmax derivatives are expressed from the cached output;
    relu/leaky_relu need the pre-activation input x.
    """
    if kind == "sigmoid":
        return d_out * out * (1.0 - out)
    if kind == "tanh":
        return d_out * (1.0 - out * out)
    if kind == "relu":
        return d_out * (x > 0.0)
    if kind == "leaky_relu":
        return d_out * np.where(x >= 0.0, 1.0, alpha)
    if kind == "softmax_rows":
        dot = (d_out * out).sum(axis=1, keepdims=True)
        return (d_out - dot) * out
    if kind == "identity":
        return d_out.copy()
    raise ValueError(f"unknown activation {kind!r}")
