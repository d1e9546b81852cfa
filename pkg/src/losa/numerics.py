"""Dense linear algebra and stable softmax primitives.

Matrices are plain 2-D ``float32`` numpy arrays in C order. Reductions
(dot products, exponent sums) are carried out in ``float64``.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyInputError, ShapeError

DTYPE = np.float32
ACC = np.float64


def as_matrix(data, rows: int | None = None, cols: int | None = None, *, check_finite: bool = False) -> np.ndarray:
    """Coerce ``data`` to a contiguous float32 matrix, optionally checking its shape."""
    m = np.ascontiguousarray(data, dtype=DTYPE)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"buffer of length {m.size} cannot hold {rows}x{cols}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if check_finite and not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    return m


def matmul_transposed(a, b) -> np.ndarray:
    """Return ``a @ b.T`` accumulated in float64 and stored as float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot contract {a.shape} with {b.shape} on the last axis")
    return (a.astype(ACC) @ b.astype(ACC).T).astype(DTYPE)


def softmax_row(s) -> np.ndarray:
    s = np.asarray(s, dtype=ACC)
    if s.size == 0:
        raise EmptyInputError("softmax of an empty vector")
    e = np.exp(s - s.max())
    return e / e.sum()


def logsumexp_row(s) -> float:
    """Log-sum-exp of a score vector; ``-inf`` for an empty vector."""
    s = np.asarray(s, dtype=ACC)
    if s.size == 0:
        return -np.inf
    m = s.max()
    if s.size == 1 or not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(s - m).sum()))
