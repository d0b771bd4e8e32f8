"""Fixed-order float64 kernels shared by the fast path and the oracle.

Every logit the engine emits must match the dense oracle bit for bit, so
both sides have to reduce each row in the same order regardless of which
rows are present.  BLAS gemv does not guarantee that (its accumulation
pattern changes with the number of rows), hence the multiply-then-reduce
form below: numpy's pairwise row reduction depends only on the row length
and dtype, never on sibling rows.
"""

from __future__ import annotations

import numpy as np

__all__ = ["as_f64", "gemv_rows", "l2_norm", "logsumexp", "NEG_INF"]

NEG_INF = float("-inf")


def as_f64(a) -> np.ndarray:
    """Return `a` as a C-contiguous float64 array."""
    return np.ascontiguousarray(a, dtype=np.float64)


def gemv_rows(rows: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Row-wise dot products ``rows @ h`` with a subset-stable summation order.

    ``gemv_rows(W, h)[sel] == gemv_rows(W[sel], h)`` holds bitwise for any
    row selection, which is the contract the gather path relies on.
    """
    rows = as_f64(rows)
    h = as_f64(h)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[1] != h.shape[0]:
        raise ValueError(f"dimension mismatch: rows d={rows.shape[1]}, h d={h.shape[0]}")
    return (rows * h).sum(axis=1)


def l2_norm(v: np.ndarray) -> float:
    """Euclidean norm with the same fixed reduction order as gemv_rows."""
    v = as_f64(v)
    return float(np.sqrt((v * v).sum()))


def logsumexp(values: np.ndarray) -> float:
    """log(sum(exp(values))) via max shift; -inf for an empty input.

    Reduction runs in index order (numpy pairwise), so repeated calls over
    the same array are bit-identical.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return NEG_INF
    m = float(values.max())
    if m == NEG_INF:
        return NEG_INF
    if np.isposinf(m):
        return float("inf")
    return m + float(np.log(np.exp(values - m).sum()))
