"""Dense ground truth: full logits, exact softmax, TV distance, external mass.

Deliberately plain code.  The only subtlety is that `dense_logits` and the
sparse gather path share one row-reduction kernel, so a gathered logit is
bit-equal to the oracle logit for the same token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._linalg import gemv_rows, logsumexp
from .tensor_io import EmbeddingTable

__all__ = ["DenseResult", "dense_logits", "tv_distance", "external_mass", "TvResult"]


@dataclass(frozen=True)
class DenseResult:
    """Exact logits and softmax over the full vocabulary."""

    logits: np.ndarray
    probs: np.ndarray
    order: np.ndarray  # token ids sorted by (logit desc, id asc)

    def topk(self, k: int) -> np.ndarray:
        return self.order[:k]


def dense_logits(table: EmbeddingTable, h: np.ndarray) -> DenseResult:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (table.hidden_dim,):
        raise ValueError(f"query must have shape ({table.hidden_dim},), got {h.shape}")
    logits = gemv_rows(table.weights, h) + table.bias
    lse = logsumexp(logits)
    probs = np.exp(logits - lse)
    order = np.lexsort((np.arange(table.vocab_size), -logits))
    return DenseResult(logits=logits, probs=probs, order=order)


class TvResult(NamedTuple):
    tv: float
    residual_ratio: float  # R / (Z_S + R), computed independently in log domain


def tv_distance(full: DenseResult, sub_ids: np.ndarray) -> TvResult:
    """Total variation between the true softmax and the S-renormalized one.

    Returns both the direct half-L1 sum and the closed form R/(Z_S+R); the
    two agree analytically and serve as mutual checks.
    """
    sub_ids = np.asarray(sub_ids, dtype=np.int64)
    if sub_ids.size == 0:
        raise ValueError("sub-vocabulary is empty")
    V = full.logits.shape[0]
    mask = np.zeros(V, dtype=bool)
    mask[sub_ids] = True

    sub_lse = logsumexp(full.logits[mask])
    p_tilde = np.zeros(V)
    p_tilde[mask] = np.exp(full.logits[mask] - sub_lse)
    tv = 0.5 * float(np.abs(full.probs - p_tilde).sum())

    out_lse = logsumexp(full.logits[~mask])
    if out_lse == float("-inf"):
        ratio = 0.0
    else:
        ratio = 1.0 / (1.0 + float(np.exp(sub_lse - out_lse)))
    return TvResult(tv=tv, residual_ratio=ratio)


def external_mass(full: DenseResult, sub_ids: np.ndarray) -> float:
    """True probability mass outside the sub-vocabulary."""
    sub_ids = np.asarray(sub_ids, dtype=np.int64)
    mask = np.zeros(full.logits.shape[0], dtype=bool)
    mask[sub_ids] = True
    return float(full.probs[~mask].sum())
