"""Dense numeric kernels.

Tensors are plain ``numpy.ndarray`` values in float32. Every kernel
accumulates in float64 and rounds once on the way out, then checks the
result for NaN/Inf. Each vectorized kernel has a ``*_naive`` twin written
as explicit scalar loops; the test-suite holds the two against each other.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, NumericFault

DTYPE = np.float32

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_COEF = 0.044715
QUICK_GELU_COEF = 1.702


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(op: str, x: np.ndarray) -> np.ndarray:
    """Raise :class:`NumericFault` pointing at the first non-finite entry."""
    finite = np.isfinite(x)
    if not finite.all():
        flat = int(np.argmin(finite.ravel()))
        raise NumericFault(op, np.unravel_index(flat, x.shape))
    return x


def _finish(op: str, x64: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # overflow to inf is reported by check_finite
        out = np.ascontiguousarray(x64, dtype=DTYPE)
    return check_finite(op, out)


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Leading dimensions broadcast like ``numpy.matmul`` so per-head batches
    can go through the same kernel.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _finish("matmul", np.matmul(a.astype(np.float64), b.astype(np.float64)))


def matmul_naive(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return _finish("matmul", out)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.ndim}-d input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _finish("softmax", e / e.sum(axis=axis, keepdims=True))


def softmax_naive(x) -> np.ndarray:
    """Softmax of a 1-d sequence, one element at a time."""
    vals = [float(v) for v in np.asarray(x).ravel()]
    top = max(vals)
    exps = [math.exp(v - top) for v in vals]
    total = math.fsum(exps)
    return _finish("softmax", np.array([e / total for e in exps]))


def layernorm(x, gain, bias, eps: float) -> np.ndarray:
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / np.sqrt(var + eps)
    return _finish("layernorm", normed * np.asarray(gain, np.float64) + np.asarray(bias, np.float64))


def layernorm_naive(row, gain, bias, eps: float) -> np.ndarray:
    """Two-pass layernorm over a single row."""
    vals = [float(v) for v in np.asarray(row).ravel()]
    d = len(vals)
    mean = math.fsum(vals) / d
    var = math.fsum((v - mean) ** 2 for v in vals) / d
    denom = math.sqrt(var + eps)
    g = np.asarray(gain, np.float64)
    b = np.asarray(bias, np.float64)
    return _finish("layernorm", np.array([(v - mean) / denom * g[j] + b[j] for j, v in enumerate(vals)]))


def gelu(x) -> np.ndarray:
    """Tanh-approximated GELU."""
    x = np.asarray(x, dtype=np.float64)
    return _finish("gelu", 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x**3))))


def quick_gelu(x) -> np.ndarray:
    from scipy.special import expit

    x = np.asarray(x, dtype=np.float64)
    return _finish("quick_gelu", x * expit(QUICK_GELU_COEF * x))


def gelu_erf(x) -> np.ndarray:
    """Exact (erf-based) GELU, used by several released checkpoints."""
    from scipy.special import erf

    x = np.asarray(x, dtype=np.float64)
    return _finish("gelu_erf", 0.5 * x * (1.0 + erf(x / math.sqrt(2.0))))


def _scalar_gelu(v: float) -> float:
    return 0.5 * v * (1.0 + math.tanh(SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)))


def _scalar_quick_gelu(v: float) -> float:
    # split on sign so exp never overflows
    if v >= 0:
        return v / (1.0 + math.exp(-QUICK_GELU_COEF * v))
    e = math.exp(QUICK_GELU_COEF * v)
    return v * e / (1.0 + e)


def _scalar_gelu_erf(v: float) -> float:
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


_SCALAR_NONLIN = {
    "gelu": _scalar_gelu,
    "quick_gelu": _scalar_quick_gelu,
    "gelu_erf": _scalar_gelu_erf,
}

NONLINEARITIES = {
    "gelu": gelu,
    "quick_gelu": quick_gelu,
    "gelu_erf": gelu_erf,
}


def nonlinearity_naive(name: str, x) -> np.ndarray:
    fn = _SCALAR_NONLIN[name]
    arr = np.asarray(x, dtype=np.float64)
    return _finish(name, np.array([fn(float(v)) for v in arr.ravel()]).reshape(arr.shape))


def row_norms(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _finish("row_norms", np.sqrt((x * x).sum(axis=-1)))


def row_norms_naive(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = []
    for row in x.reshape(-1, x.shape[-1]):
        out.append(math.sqrt(math.fsum(float(v) * float(v) for v in row)))
    return _finish("row_norms", np.array(out).reshape(x.shape[:-1]))
