"""Dense rank-1..3 array kernels used by the recurrent model.

Arrays are plain ``numpy.ndarray`` objects (row-major, C order). The functions
here add the shape checking the model relies on, plus the two mode products
used to build the low-rank adaptation and a central-difference gradient
utility that serves as the oracle for every analytic gradient in the package.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError

MAX_RANK = 3


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Return ``x`` as a contiguous float array of rank <= 3."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def mode1_product(c: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Contract ``c`` (length k) against the first axis of ``t`` (k, p, r)."""
    c = np.asarray(c)
    t = np.asarray(t)
    if c.ndim != 1 or t.ndim != 3:
        raise DimensionError(f"mode-1 product needs a vector and a 3-way tensor, got {c.shape} and {t.shape}")
    if c.shape[0] != t.shape[0]:
        raise DimensionError(f"mode-1 product length mismatch: vector {c.shape[0]} vs tensor axis {t.shape[0]}")
    out = np.zeros(t.shape[1:], dtype=np.result_type(c, t))
    for j in range(c.shape[0]):
        out += c[j] * t[j]
    return out


def mode3_product(t: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Contract ``c`` (length k) against the last axis of ``t`` (r, q, k)."""
    c = np.asarray(c)
    t = np.asarray(t)
    if c.ndim != 1 or t.ndim != 3:
        raise DimensionError(f"mode-3 product needs a 3-way tensor and a vector, got {t.shape} and {c.shape}")
    if c.shape[0] != t.shape[2]:
        raise DimensionError(f"mode-3 product length mismatch: vector {c.shape[0]} vs tensor axis {t.shape[2]}")
    out = np.zeros(t.shape[:2], dtype=np.result_type(c, t))
    for j in range(c.shape[0]):
        out += t[:, :, j] * c[j]
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place one element at a time and restored afterwards,
    so ``f`` may close over the very array being differentiated.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("finite_diff_grad needs a contiguous array")
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while differencing element {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / (|n| + floor) over all elements (0.0 for empty arrays)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise DimensionError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))
