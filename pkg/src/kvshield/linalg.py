"""Dense matrix kernels on 2-D numpy arrays.

Every matrix in kvshield is a C-contiguous 2-D ``numpy.ndarray`` of
``float32`` or ``float64``. The reference :func:`matmul` reduces over the
inner index in ascending order, so its rounding is identical to a naive
triple loop ``acc = acc + a[i, k] * b[k, j]`` for ``k = 0, 1, ...``.
"""

from __future__ import annotations

import numpy as np

from kvshield.errors import ShapeError, ConfigError

PRECISIONS = {"f32": np.float32, "f64": np.float64}

# products above this many elements are accumulated with an explicit k-loop
_ACCUMULATE_LIMIT = 1 << 22


def dtype_of(precision: str) -> type:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def scalar_bytes(precision: str) -> int:
    return np.dtype(dtype_of(precision)).itemsize


def as_matrix(data, precision: str | None = None) -> np.ndarray:
    """Coerce ``data`` to a contiguous 2-D float matrix.

    With ``precision=None`` the input dtype is kept if it is already f32/f64,
    otherwise f64 is used.
    """
    if precision is not None:
        dtype = dtype_of(precision)
    elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        dtype = data.dtype
    else:
        dtype = np.float64
    m = np.ascontiguousarray(data, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-index reduction over the inner dimension."""
    _check_matmul(a, b)
    m, k = a.shape
    n = b.shape[1]
    dtype = np.result_type(a, b)
    if k == 0:
        return np.zeros((m, n), dtype=dtype)
    if m * k * n <= _ACCUMULATE_LIMIT:
        # add.accumulate is a strict left-to-right recurrence along the axis
        prod = a[:, :, None] * b[None, :, :]
        return np.ascontiguousarray(np.add.accumulate(prod, axis=1)[:, -1, :], dtype=dtype)
    out = np.zeros((m, n), dtype=dtype)
    for i in range(k):
        out += a[:, i, None] * b[None, i, :]
    return out


def matmul_fast(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """BLAS-backed product. Reduction order is unspecified; use for speed only."""
    _check_matmul(a, b)
    return a @ b


def transpose(m: np.ndarray) -> np.ndarray:
    if m.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D matrix, got shape {m.shape}")
    return np.ascontiguousarray(m.T)


def scale(m: np.ndarray, factor: float) -> np.ndarray:
    return m * m.dtype.type(factor)


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax along each row, shifted by the row max for stability."""
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"row_softmax needs a non-empty 2-D matrix, got shape {m.shape}")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
