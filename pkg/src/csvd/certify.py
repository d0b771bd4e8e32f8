"""Certificates over a partially computed sub-vocabulary.

Three machine-checkable guarantees, all driven by the unopened-cluster
bounds:

* top-k:    every unopened bound is strictly below the k-th best computed
            logit, so the computed top-k set equals the full-vocabulary one.
            Ties fail on purpose; the tied cluster must be opened.
* softmax:  rho = Rhat / (Z_S + Rhat) <= eps implies the renormalized
            sub-vocabulary distribution is within eps total variation of
            the true softmax, where Rhat = sum over unopened clusters of
            |c| * exp(U_c) dominates the missing exponential mass.
* top-p:    delta = Rhat / Z_S <= eps / (1 - eps) caps the true external
            probability mass at eps.

Z_S and Rhat live in log domain.  Z_S is merged streamingly and recomputed
from scratch every 64 merges to cap drift; Rhat is recomputed from the
surviving clusters on every change (removal has no stable streaming form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._linalg import NEG_INF, logsumexp
from .bounds import BoundVector

__all__ = [
    "CertState",
    "CertStatus",
    "TopkDecision",
    "SoftmaxDecision",
    "Tightness",
    "topk_certified",
    "softmax_eps_certified",
    "topp_certified",
    "tightness",
    "residual_log_rhat",
]

_RECOMPUTE_EVERY = 64


@dataclass(frozen=True)
class CertStatus:
    kind: str  # topk_exact | softmax_eps | topp_mass | uncertified
    epsilon_achieved: float
    u_max: float  # max unopened bound at decision time
    topk_min: float  # k-th best computed logit at decision time


class CertState:
    """Mutable per-step state: computed logits plus the log-domain residual."""

    def __init__(self, k: int):
        self.k = k
        self.opened: set = set()
        self._ids: list = []
        self._logits: list = []
        self.token_ids = np.empty(0, dtype=np.int64)
        self.logits = np.empty(0, dtype=np.float64)
        self.log_z = NEG_INF
        self.log_rhat = NEG_INF
        self._merges = 0

    def __len__(self) -> int:
        return self.token_ids.size

    def merge_cluster(self, cluster: int, token_ids: np.ndarray, logits: np.ndarray) -> None:
        self.opened.add(int(cluster))
        self._ids.append(np.asarray(token_ids, dtype=np.int64))
        self._logits.append(np.asarray(logits, dtype=np.float64))
        self.token_ids = np.concatenate(self._ids)
        self.logits = np.concatenate(self._logits)
        self._merges += 1
        if self._merges % _RECOMPUTE_EVERY == 0:
            self.log_z = logsumexp(self.logits)
        else:
            self.log_z = float(np.logaddexp(self.log_z, logsumexp(logits)))

    def topk_min(self) -> float:
        if len(self) < self.k:
            return NEG_INF
        return float(np.partition(self.logits, len(self) - self.k)[len(self) - self.k])

    def set_residual(self, log_rhat: float) -> None:
        self.log_rhat = log_rhat

    def rho(self) -> float:
        """Rhat / (Z_S + Rhat) evaluated in log domain."""
        if self.log_rhat == NEG_INF:
            return 0.0
        if self.log_z == NEG_INF:
            return 1.0
        return 1.0 / (1.0 + math.exp(self.log_z - self.log_rhat))

    def delta(self) -> float:
        """Rhat / Z_S evaluated in log domain."""
        if self.log_rhat == NEG_INF:
            return 0.0
        if self.log_z == NEG_INF:
            return math.inf
        return math.exp(self.log_rhat - self.log_z)

    def lse_drift_ok(self, rel: float = 1e-10) -> bool:
        exact = logsumexp(self.logits)
        return abs(self.log_z - exact) <= rel * max(1.0, abs(exact))


def residual_log_rhat(bounds: BoundVector, sizes: np.ndarray, opened_mask: np.ndarray) -> float:
    """log of sum over unopened clusters of |c| * exp(U_c)."""
    unopened = ~opened_mask
    if not unopened.any():
        return NEG_INF
    return logsumexp(np.log(sizes[unopened]) + bounds.values[unopened])


class TopkDecision(NamedTuple):
    certified: bool
    u_max: float
    topk_min: float


def topk_certified(state: CertState, bounds: BoundVector, k: int) -> TopkDecision:
    """True iff every unopened cluster bound is strictly below the k-th logit."""
    if len(state) < k:
        return TopkDecision(False, NEG_INF, NEG_INF)
    kth = state.topk_min() if k == state.k else float(
        np.partition(state.logits, len(state) - k)[len(state) - k]
    )
    unopened = [c for c in range(bounds.values.size) if c not in state.opened]
    if not unopened:
        return TopkDecision(True, NEG_INF, kth)
    u_max = float(bounds.values[unopened].max())
    return TopkDecision(u_max < kth, u_max, kth)


class SoftmaxDecision(NamedTuple):
    certified: bool
    rho: float


def softmax_eps_certified(state: CertState, epsilon: float) -> SoftmaxDecision:
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if len(state) == 0:
        return SoftmaxDecision(False, 1.0)
    rho = state.rho()
    return SoftmaxDecision(rho <= epsilon, rho)


def topp_certified(state: CertState, epsilon: float) -> SoftmaxDecision:
    """External-mass certificate via delta <= eps / (1 - eps)."""
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if len(state) == 0:
        return SoftmaxDecision(False, 1.0)
    delta = state.delta()
    mass_bound = delta / (1.0 + delta) if math.isfinite(delta) else 1.0
    return SoftmaxDecision(delta <= epsilon / (1.0 - epsilon), mass_bound)


class Tightness(NamedTuple):
    value: float
    fully_dominated: bool


def tightness(state: CertState, bounds: BoundVector) -> Tightness:
    """(max_S logit - min_S logit) / (U_max - min_S logit); near 1 is tight."""
    if len(state) < 2:
        raise ValueError("tightness needs at least two computed logits")
    unopened = [c for c in range(bounds.values.size) if c not in state.opened]
    if not unopened:
        raise ValueError("tightness needs at least one unopened cluster")
    lo = float(state.logits.min())
    hi = float(state.logits.max())
    u_max = float(bounds.values[unopened].max())
    if u_max <= lo:
        return Tightness(1.0, True)
    return Tightness((hi - lo) / (u_max - lo), False)
