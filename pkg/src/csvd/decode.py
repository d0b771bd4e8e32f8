"""Online engine: bound-ordered cluster opening with certificates and fallback.

A decoding step computes all cluster bounds, then opens clusters from a
max-heap keyed by bound until one of the configured certificates holds.
Opening a cluster gathers its contiguous row range and computes exact
logits with the same fixed-order kernel the oracle uses, so returned
logits are bit-equal to a dense recomputation.

If the sub-vocabulary outgrows the token budget before certification, an
escalation chain runs: open a few more clusters, then retry with a relaxed
tolerance, then compute the full vocabulary.  The full-vocabulary level is
always appended implicitly, so a step always returns.

The one-shot variant (`decode_step_batchselect`) instead selects clusters
down the bound ranking until the budget fills, computes everything, and
certifies once; the sharded simulation reproduces exactly this behavior.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from ._linalg import NEG_INF, as_f64, gemv_rows
from .bounds import BoundVector, cluster_bounds
from .certify import (
    CertState,
    CertStatus,
    residual_log_rhat,
    softmax_eps_certified,
    tightness,
    topk_certified,
    topp_certified,
)
from .cluster_index import ClusterIndex
from .tensor_io import EmbeddingTable, table_fingerprint

__all__ = [
    "ConfigError",
    "PartialExpand",
    "RelaxEps",
    "FullVocab",
    "DecodeConfig",
    "StepMetrics",
    "DecodeOutcome",
    "decode_step",
    "decode_step_batchselect",
    "apply_fallback",
    "adapt_budget",
    "AdaptiveBudget",
    "warmup_k_max",
    "FlopReport",
    "flop_report",
    "flop_accounting",
]

TARGET_KINDS = ("topk", "softmax_eps", "topp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PartialExpand:
    delta_c: int = 4
    name: str = field(default="partial_expand", init=False)


@dataclass(frozen=True)
class RelaxEps:
    factor: float = 2.0
    name: str = field(default="relax_eps", init=False)


@dataclass(frozen=True)
class FullVocab:
    name: str = field(default="full_vocab", init=False)


@dataclass(frozen=True)
class DecodeConfig:
    k: int = 10
    epsilon: float = 0.05
    targets: tuple = ("topk", "softmax_eps")
    k_max: int | None = None  # None resolves to V // 2
    fallback: tuple = (PartialExpand(), RelaxEps(), FullVocab())
    adaptive_enabled: bool = False
    alpha: float = 0.01
    rho_target: float = 0.02
    ema_half_life: float = 100.0
    warmup_steps: int = 4
    warmup_factor: float = 2.0
    slack_mode: str = "none"

    def resolved_k_max(self, vocab_size: int) -> int:
        if self.k_max is None:
            return max(self.k, vocab_size // 2)
        return self.k_max

    def validate(self, vocab_size: int) -> None:
        if not self.targets or any(t not in TARGET_KINDS for t in self.targets):
            raise ConfigError(f"targets must be a non-empty subset of {TARGET_KINDS}")
        if not 1 <= self.k <= vocab_size:
            raise ConfigError(f"need 1 <= k <= V, got k={self.k}, V={vocab_size}")
        k_max = self.resolved_k_max(vocab_size)
        if not self.k <= k_max <= vocab_size:
            raise ConfigError(f"need k <= K_max <= V, got K_max={k_max}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")


@dataclass
class StepMetrics:
    sub_size: int
    ratio: float
    clusters_opened: int
    xi: float
    cert_kind: str
    fallback: str | None
    rho: float
    flops_sparse: int
    flops_bounds: int
    heap_pops: int
    step: int = -1


@dataclass
class DecodeOutcome:
    token_ids: np.ndarray  # original numbering
    logits: np.ndarray  # bit-equal to the dense oracle at those ids
    status: CertStatus
    fallback_used: str | None
    stats: StepMetrics


def _check_table_index(table: EmbeddingTable, index: ClusterIndex) -> None:
    if index.fingerprint != table_fingerprint(table):
        raise ConfigError("index fingerprint does not match table")


class _StepContext:
    """Shared mechanics for the incremental and one-shot variants."""

    def __init__(self, table, index, h, cfg, k_max, bounds: BoundVector | None = None):
        self.table = table
        self.index = index
        self.h = as_f64(h)
        self.cfg = cfg
        self.k_max = k_max
        self.bounds = bounds if bounds is not None else cluster_bounds(
            index, self.h, slack_mode=cfg.slack_mode
        )
        self.state = CertState(cfg.k)
        self.opened_mask = np.zeros(index.n_clusters, dtype=bool)
        self.state.set_residual(
            residual_log_rhat(self.bounds, index.sizes, self.opened_mask)
        )
        self.heap_pops = 0
        # descending bound, ties to the lower cluster id
        self._order = np.lexsort((np.arange(index.n_clusters), -self.bounds.values))
        self._cursor = 0

    def open_cluster(self, c: int) -> None:
        members = self.index.members(c)
        logits = gemv_rows(self.table.weights[members], self.h) + self.table.bias[members]
        self.state.merge_cluster(c, members, logits)
        self.opened_mask[c] = True
        self.state.set_residual(
            residual_log_rhat(self.bounds, self.index.sizes, self.opened_mask)
        )

    def open_next_by_bound(self) -> bool:
        while self._cursor < self._order.size:
            c = int(self._order[self._cursor])
            self._cursor += 1
            if not self.opened_mask[c]:
                self.open_cluster(c)
                return True
        return False

    def u_max_unopened(self) -> float:
        if self.opened_mask.all():
            return NEG_INF
        return float(self.bounds.values[~self.opened_mask].max())

    def check_targets(self, epsilon: float) -> CertStatus | None:
        for target in self.cfg.targets:
            if target == "topk":
                decision = topk_certified(self.state, self.bounds, self.cfg.k)
                if decision.certified:
                    return CertStatus("topk_exact", 0.0, decision.u_max, decision.topk_min)
            elif target == "softmax_eps":
                decision = softmax_eps_certified(self.state, epsilon)
                if decision.certified:
                    return CertStatus(
                        "softmax_eps", decision.rho, self.u_max_unopened(), self.state.topk_min()
                    )
            elif target == "topp":
                decision = topp_certified(self.state, epsilon)
                if decision.certified:
                    return CertStatus(
                        "topp_mass", decision.rho, self.u_max_unopened(), self.state.topk_min()
                    )
        return None

    def outcome(self, status: CertStatus, fallback_used: str | None) -> DecodeOutcome:
        state = self.state
        V = self.index.vocab_size
        try:
            xi = tightness(state, self.bounds).value
        except ValueError:
            xi = math.nan
        stats = StepMetrics(
            sub_size=len(state),
            ratio=len(state) / V,
            clusters_opened=len(state.opened),
            xi=xi,
            cert_kind=status.kind,
            fallback=fallback_used,
            rho=state.rho(),
            flops_sparse=2 * len(state) * self.index.hidden_dim,
            flops_bounds=2 * self.index.n_clusters * self.bounds_dim(),
            heap_pops=self.heap_pops,
        )
        return DecodeOutcome(
            token_ids=state.token_ids,
            logits=state.logits,
            status=status,
            fallback_used=fallback_used,
            stats=stats,
        )

    def full_vocab_outcome(self) -> DecodeOutcome:
        V = self.index.vocab_size
        logits = gemv_rows(self.table.weights, self.h) + self.table.bias
        kth = float(np.partition(logits, V - self.cfg.k)[V - self.cfg.k])
        status = CertStatus("topk_exact", 0.0, NEG_INF, kth)
        stats = StepMetrics(
            sub_size=V,
            ratio=1.0,
            clusters_opened=self.index.n_clusters,
            xi=math.nan,
            cert_kind=status.kind,
            fallback="full_vocab",
            rho=0.0,
            flops_sparse=2 * V * self.index.hidden_dim,
            flops_bounds=2 * self.index.n_clusters * self.bounds_dim(),
            heap_pops=self.heap_pops,
        )
        return DecodeOutcome(
            token_ids=np.arange(V, dtype=np.int64),
            logits=logits,
            status=status,
            fallback_used="full_vocab",
            stats=stats,
        )

    def bounds_dim(self) -> int:
        return self.index.hidden_dim + (1 if self.index.mode == "bias_augmented" else 0)


def apply_fallback(level, ctx: _StepContext) -> DecodeOutcome | None:
    """Run one escalation level; None means escalate to the next level."""
    if isinstance(level, PartialExpand):
        for _ in range(level.delta_c):
            if not ctx.open_next_by_bound():
                break
        status = ctx.check_targets(ctx.cfg.epsilon)
        if status is not None:
            return ctx.outcome(status, "partial_expand")
        return None
    if isinstance(level, RelaxEps):
        relaxed = ctx.cfg.epsilon * level.factor
        for target in ctx.cfg.targets:
            if target == "softmax_eps":
                decision = softmax_eps_certified(ctx.state, min(relaxed, 1.0 - 1e-12))
                if decision.certified:
                    status = CertStatus(
                        "softmax_eps", decision.rho, ctx.u_max_unopened(), ctx.state.topk_min()
                    )
                    return ctx.outcome(status, "relax_eps")
            elif target == "topp":
                decision = topp_certified(ctx.state, min(relaxed, 1.0 - 1e-12))
                if decision.certified:
                    status = CertStatus(
                        "topp_mass", decision.rho, ctx.u_max_unopened(), ctx.state.topk_min()
                    )
                    return ctx.outcome(status, "relax_eps")
        return None
    if isinstance(level, FullVocab):
        return ctx.full_vocab_outcome()
    raise ConfigError(f"unknown fallback level {level!r}")


def _run_fallback_chain(ctx: _StepContext) -> DecodeOutcome:
    levels = list(ctx.cfg.fallback)
    if not any(isinstance(lv, FullVocab) for lv in levels):
        levels.append(FullVocab())
    for level in levels:
        outcome = apply_fallback(level, ctx)
        if outcome is not None:
            return outcome
    raise AssertionError("full_vocab level is total")  # pragma: no cover


def decode_step(
    table: EmbeddingTable,
    index: ClusterIndex,
    h: np.ndarray,
    cfg: DecodeConfig,
    k_max: int | None = None,
) -> DecodeOutcome:
    """One certified decoding step via incremental heap-ordered opening.

    `k_max` overrides the configured budget (used by warmup and the
    adaptive controller); everything else comes from `cfg`.
    """
    _check_table_index(table, index)
    cfg.validate(index.vocab_size)
    k_max = cfg.resolved_k_max(index.vocab_size) if k_max is None else k_max
    ctx = _StepContext(table, index, h, cfg, k_max)

    heap = [(-ctx.bounds.values[c], c) for c in range(index.n_clusters)]
    heapq.heapify(heap)
    while True:
        if len(ctx.state) > 0:
            status = ctx.check_targets(cfg.epsilon)
            if status is not None:
                return ctx.outcome(status, None)
        if not heap:  # pragma: no cover - certification holds once all opened
            raise AssertionError("heap exhausted without certification")
        _, c = heapq.heappop(heap)
        ctx.heap_pops += 1
        ctx._cursor += 1  # heap pop order equals the ranked order (same key, same tie-break)
        ctx.open_cluster(c)
        if len(ctx.state) > k_max:
            return _run_fallback_chain(ctx)


def _select_by_bound(order: np.ndarray, sizes: np.ndarray, k_max: int) -> list:
    """Prefix of the bound ranking that fits the token budget (at least one)."""
    selected = []
    total = 0
    for c in order:
        c = int(c)
        size = int(sizes[c])
        if selected and total + size > k_max:
            break
        selected.append(c)
        total += size
        if total >= k_max:
            break
    return selected


def decode_step_batchselect(
    table: EmbeddingTable,
    index: ClusterIndex,
    h: np.ndarray,
    cfg: DecodeConfig,
    k_max: int | None = None,
) -> DecodeOutcome:
    """One-shot variant: pick top clusters under the budget, then verify once."""
    _check_table_index(table, index)
    cfg.validate(index.vocab_size)
    k_max = cfg.resolved_k_max(index.vocab_size) if k_max is None else k_max
    ctx = _StepContext(table, index, h, cfg, k_max)

    selected = _select_by_bound(ctx._order, index.sizes, k_max)
    ctx._cursor = len(selected)
    for c in selected:
        ctx.open_cluster(c)
    status = ctx.check_targets(cfg.epsilon)
    if status is not None:
        return ctx.outcome(status, None)
    return _run_fallback_chain(ctx)


def adapt_budget(k_t: int, rho_fall_observed: float, cfg: DecodeConfig, vocab_size: int) -> int:
    """Budget update toward the target fallback rate, clamped to [k, V].

    The gain pushes the budget up when fallbacks run hot and down when they
    are rare, which is the feedback direction that actually holds the rate
    at the target.
    """
    factor = 1.0 + cfg.alpha * (rho_fall_observed - cfg.rho_target)
    proposed = int(math.floor(k_t * factor + 0.5))
    return max(cfg.k, min(vocab_size, proposed))


def warmup_k_max(cfg: DecodeConfig, k_max: int, step: int, vocab_size: int) -> int:
    """Widened budget for the first few steps of a sequence."""
    if step < cfg.warmup_steps:
        return min(vocab_size, int(math.floor(k_max * cfg.warmup_factor + 0.5)))
    return k_max


class AdaptiveBudget:
    """Sequential controller: EMA of the fallback indicator drives the budget.

    The budget is held in float internally so the slow downward drift near
    the target is not rounded away each step; `adapt_budget` stays the
    integer one-shot form of the same update.
    """

    def __init__(self, cfg: DecodeConfig, vocab_size: int, initial_k_max: int | None = None):
        self.cfg = cfg
        self.vocab_size = vocab_size
        start = cfg.resolved_k_max(vocab_size) if initial_k_max is None else initial_k_max
        self._k_float = float(start)
        self.ema = 0.0
        self._decay = 0.5 ** (1.0 / cfg.ema_half_life)

    @property
    def k_max(self) -> int:
        return max(self.cfg.k, min(self.vocab_size, int(math.floor(self._k_float + 0.5))))

    def effective_k_max(self, step: int) -> int:
        return warmup_k_max(self.cfg, self.k_max, step, self.vocab_size)

    def observe(self, fallback_fired: bool) -> None:
        self.ema = self._decay * self.ema + (1.0 - self._decay) * float(fallback_fired)
        if self.cfg.adaptive_enabled:
            self._k_float *= 1.0 + self.cfg.alpha * (self.ema - self.cfg.rho_target)
            self._k_float = max(float(self.cfg.k), min(float(self.vocab_size), self._k_float))


@dataclass(frozen=True)
class FlopReport:
    flops_bounds: int
    flops_sparse: int
    flops_full: int
    speedup_proxy: float


def flop_report(vocab_size: int, hidden_dim: int, n_clusters: int, sub_size: int,
                bounds_dim: int | None = None) -> FlopReport:
    """Multiply-add accounting at 2 FLOPs per (mul, add) pair."""
    bounds_dim = hidden_dim if bounds_dim is None else bounds_dim
    flops_bounds = 2 * n_clusters * bounds_dim
    flops_sparse = 2 * sub_size * hidden_dim
    flops_full = 2 * vocab_size * hidden_dim
    denom = flops_bounds + flops_sparse
    return FlopReport(
        flops_bounds=flops_bounds,
        flops_sparse=flops_sparse,
        flops_full=flops_full,
        speedup_proxy=flops_full / denom if denom else math.inf,
    )


def flop_accounting(outcome: DecodeOutcome, table: EmbeddingTable, index: ClusterIndex) -> FlopReport:
    bounds_dim = index.hidden_dim + (1 if index.mode == "bias_augmented" else 0)
    return flop_report(
        table.vocab_size, table.hidden_dim, index.n_clusters, outcome.stats.sub_size, bounds_dim
    )
