"""Dense and token-sparse matrix kernels with deterministic summation order.

A ``Matrix2D`` is a 2-D C-contiguous numpy array of 32-bit floats (64-bit is
also accepted so numeric oracles can run the same code at higher precision).
An ``IndexSet`` is a 1-D int64 array of strictly increasing row positions.

All kernels reduce over the contraction dimension strictly left-to-right per
output element and parallelize over output rows only, so results are
bit-reproducible across runs and thread counts. The two fused kernels emulate
an I/O-stage permutation on a GPU pipeline: ``gather_gemm`` selects its input
rows while loading, and ``gemm_scatter`` writes its output rows straight into
a full-length destination buffer, so neither ever materializes the compacted
intermediate in the public interface.

Thread safety: kernels share no mutable state; concurrent calls are safe as
long as ``gemm_scatter`` destinations do not overlap.
"""

from __future__ import annotations

import numpy as np

from . import _kernels_nb as _nb
from .errors import IndexSetError, NonFiniteError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)


def _check_matrix(name: str, a: np.ndarray) -> np.ndarray:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got {getattr(a, 'shape', type(a))}")
    if a.dtype.type not in _ALLOWED_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {a.dtype}")
    return np.ascontiguousarray(a)


def as_index_set(indices, length: int) -> np.ndarray:
    """Validate and return ``indices`` as an IndexSet for rows of size ``length``.

    Raises IndexSetError unless the indices are strictly increasing,
    duplicate-free and within ``[0, length)``.
    """
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size:
        if idx[0] < 0 or idx[-1] >= length:
            raise IndexSetError(f"index out of range for length {length}")
        if np.any(np.diff(idx) <= 0):
            raise IndexSetError("indices must be strictly increasing without duplicates")
    return np.ascontiguousarray(idx)


def gemm(a: np.ndarray, b: np.ndarray, accumulate_into: np.ndarray | None = None) -> np.ndarray:
    """Matrix product ``a @ b`` with fixed left-to-right summation over k.

    Args:
        a: (m, k) matrix.
        b: (k, n) matrix.
        accumulate_into: optional (m, n) matrix; when given, the product is
            added into it in place and it is returned.

    Returns:
        The (m, n) product (or the accumulation target).
    """
    a = _check_matrix("a", a)
    b = _check_matrix("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes: {a.dtype} vs {b.dtype}")
    if accumulate_into is None:
        out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    else:
        out = accumulate_into
        if not isinstance(out, np.ndarray) or out.shape != (a.shape[0], b.shape[1]):
            raise ShapeError("accumulate_into has the wrong shape")
        if out.dtype != a.dtype or not out.flags.c_contiguous:
            raise ShapeError("accumulate_into must be C-contiguous and match the input dtype")
    _nb.gemm_acc(a, b, out)
    return out


def gather_gemm(x_full: np.ndarray, active, w: np.ndarray) -> np.ndarray:
    """Compute ``x_full[active] @ w`` with the row gather fused into the load.

    Args:
        x_full: (rows, k) full-length input.
        active: IndexSet into the rows of ``x_full``.
        w: (k, n) weight matrix.

    Returns:
        (len(active), n) result, equal to selecting rows first and then
        multiplying, to the last bit.
    """
    x_full = _check_matrix("x_full", x_full)
    w = _check_matrix("w", w)
    if x_full.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimensions differ: {x_full.shape} @ {w.shape}")
    if x_full.dtype != w.dtype:
        raise ShapeError(f"mixed dtypes: {x_full.dtype} vs {w.dtype}")
    idx = as_index_set(active, x_full.shape[0])
    out = np.zeros((idx.shape[0], w.shape[1]), dtype=x_full.dtype)
    _nb.gather_gemm(x_full, idx, w, out)
    return out


def gemm_scatter(x_active: np.ndarray, w: np.ndarray, active, dest_full: np.ndarray) -> None:
    """Overwrite ``dest_full[active] = x_active @ w``; other rows stay bit-unchanged.

    This is the scatter-epilogue form used for partial key/value cache updates:
    each product row is written straight to its destination slot. All
    validation happens before the first write, so a rejected call leaves
    ``dest_full`` untouched.
    """
    x_active = _check_matrix("x_active", x_active)
    w = _check_matrix("w", w)
    if not isinstance(dest_full, np.ndarray) or dest_full.ndim != 2:
        raise ShapeError("dest_full must be a 2-D array")
    if not dest_full.flags.c_contiguous or not dest_full.flags.writeable:
        raise ShapeError("dest_full must be C-contiguous and writeable")
    if x_active.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimensions differ: {x_active.shape} @ {w.shape}")
    if dest_full.shape[1] != w.shape[1]:
        raise ShapeError(f"dest_full has {dest_full.shape[1]} cols, product has {w.shape[1]}")
    if not (x_active.dtype == w.dtype == dest_full.dtype):
        raise ShapeError("x_active, w and dest_full dtypes must match")
    idx = as_index_set(active, dest_full.shape[0])
    if idx.shape[0] != x_active.shape[0]:
        raise ShapeError(f"{x_active.shape[0]} source rows for {idx.shape[0]} indices")
    _nb.gemm_scatter(x_active, w, idx, dest_full)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    a = _check_matrix("a", a)
    if not np.isfinite(a).all():
        raise NonFiniteError("softmax input contains non-finite values")
    out = np.empty_like(a)
    _nb.softmax_rows(a, out)
    return out


def rmsnorm_rows(x: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise RMS normalization ``x / sqrt(mean(x^2) + eps)``.

    Returns the normalized matrix and the per-row inverse RMS factors (the
    latter are what the backward pass needs).
    """
    x = _check_matrix("x", x)
    out = np.empty_like(x)
    inv = np.empty(x.shape[0], dtype=x.dtype)
    _nb.rmsnorm_rows(x, eps, out, inv)
    return out, inv
