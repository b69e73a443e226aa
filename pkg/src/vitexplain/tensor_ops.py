"""Dense math primitives: matmul, row softmax, layer norm, exact GELU.

Everything operates on plain numpy arrays (real32 or real64), never mutates
its inputs, and is deterministic: identical inputs give bit-identical
outputs. No implicit broadcasting beyond the explicit per-row helpers here;
shape mismatches raise loudly instead of bending.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import NumericError, ShapeError

REAL32 = np.float32
REAL64 = np.float64

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def assert_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product of a 2-d [m,k] by a 2-d [k,p] array."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction (overflow-safe)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d array, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vec(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    e = np.exp(x - x.max())
    return e / e.sum()


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Per-row layer norm of [n,d]: zero mean, unit variance, then affine."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"layernorm expects a 2-d array, got {x.shape}")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("layernorm gamma/beta must have shape (d,)")
    mu = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def layernorm_backward(
    x: np.ndarray, gamma: np.ndarray, eps: float, dy: np.ndarray
) -> np.ndarray:
    """VJP of layernorm w.r.t. x given upstream dy (same shape as x)."""
    mu = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    g = dy * gamma
    return (
        g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)
    ) / sigma


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact erf-based GELU, x * Phi(x)."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + special.erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x)
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + special.erf(x * _INV_SQRT2)) + x * phi


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row of [n,d]."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"row_norms expects a 2-d array, got {x.shape}")
    return np.sqrt(np.sum(x * x, axis=1))
