"""Dense float64 kernels shared by every other module.

A "matrix" here is a 2-D ``numpy.ndarray`` of dtype float64. The public
functions check shapes at the boundary and never broadcast. The underscored
helpers further down are batch-generic (they act on the last one or two axes)
and are what the model code calls in its inner loops.
"""
import numpy as np
from scipy.special import erf

from .errors import AllMaskedRow, NonFiniteEntry, ShapeMismatch

NEG_INF = -np.inf


def as_matrix(a, *, allow_neg_inf=False, name="matrix"):
    """Coerce ``a`` to a C-contiguous float64 2-D array and validate it."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if allow_neg_inf:
        bad = np.isnan(m) | (m == np.inf)
    else:
        bad = ~np.isfinite(m)
    if bad.any():
        raise NonFiniteEntry(f"{name} has non-finite entries")
    return m


def matmul(a, b):
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(scores, temperature=1.0):
    """Softmax of ``scores / temperature`` along each row.

    Entries equal to -inf get exactly zero weight. A row with no finite entry
    raises :class:`AllMaskedRow`.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    s = as_matrix(scores, allow_neg_inf=True, name="scores")
    if s.shape[1] == 0 or np.isneginf(s).all(axis=1).any():
        raise AllMaskedRow("a row has no finite entry")
    return softmax_rows(s / temperature)


def frobenius_norm(a):
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


# -- batch-generic helpers ---------------------------------------------------

def softmax_rows(x, allow_empty=False):
    """Stable softmax over the last axis; rows that are entirely -inf become
    all-zero when ``allow_empty`` is set and raise otherwise."""
    empty = np.isneginf(x).all(axis=-1, keepdims=True)
    if empty.any() and not allow_empty:
        raise AllMaskedRow("a row has no finite entry")
    if x.shape[-1] == 0:
        return np.zeros_like(x)
    mx = np.where(empty, 0.0, x.max(axis=-1, keepdims=True))
    e = np.exp(x - mx)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(empty, 1.0, z)


def softmax_rows_backward(d_w, w):
    """Vector-Jacobian product of :func:`softmax_rows` given its output ``w``."""
    return w * (d_w - np.sum(d_w * w, axis=-1, keepdims=True))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def swap(a):
    return np.swapaxes(a, -1, -2)


ROW_BLOCK = 256


def row_matmul(x, w, block=ROW_BLOCK):
    """``x @ w`` for a per-row map, computed in blocks of ``block`` rows.

    Every BLAS call then sees the same row count, so cost stays linear in
    the number of rows instead of jumping when the library switches kernels.
    """
    rows = x.shape[-2]
    if rows <= block:
        return x @ w
    out = np.empty(x.shape[:-1] + (w.shape[-1],), dtype=np.result_type(x, w))
    for s in range(0, rows, block):
        np.matmul(x[..., s:s + block, :], w, out=out[..., s:s + block, :])
    return out


def sum_to(a, shape):
    """Sum leading broadcast axes of ``a`` so it matches ``shape``."""
    while a.ndim > len(shape):
        a = a.sum(axis=0)
    return a
