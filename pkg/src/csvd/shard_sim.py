"""Deterministic in-process simulation of multi-worker decoding.

Clusters are assigned to N logical workers by a plan; a sharded step then
runs the one-shot select-and-verify workflow phase by phase:

1. each worker computes bounds for its own clusters, bounds merge globally
   (accounted as C * 4 exchanged bytes),
2. the top clusters under the budget are selected globally, each worker
   computes exact logits for its share, results merge in selection order
   (accounted as |S| * (2d + 4) exchanged bytes),
3. certification runs once on the merged state, with the usual fallback
   escalation on failure.

Workers execute sequentially in id order and every per-cluster computation
is bit-deterministic, so the merged outcome is identical, bit for bit, to
the single-worker one-shot step regardless of N or strategy.  That
transparency is the contract; the ledger is where N actually shows up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._linalg import as_f64, l2_norm
from .bounds import BoundVector, _slack_for, raw_bounds_subset
from .cluster_index import ClusterIndex, _lloyd
from .decode import (
    DecodeConfig,
    DecodeOutcome,
    _check_table_index,
    _run_fallback_chain,
    _select_by_bound,
    _StepContext,
)
from .tensor_io import EmbeddingTable

__all__ = [
    "ShardPlan",
    "CommLedger",
    "LatencyModel",
    "STRATEGIES",
    "make_plan",
    "sharded_decode_step",
    "save_plan",
    "load_plan",
]

STRATEGIES = ("round_robin", "hotness_weighted", "semantic_grouped")


@dataclass(frozen=True)
class ShardPlan:
    n_workers: int
    strategy: str
    assignment: np.ndarray  # cluster id -> worker id
    loads: np.ndarray  # token count per worker
    sigma_load: float

    def clusters_of(self, worker: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) == worker)


@dataclass(frozen=True)
class LatencyModel:
    flops_per_unit: float = 1.0
    bytes_per_unit: float = 1.0


@dataclass(frozen=True)
class CommLedger:
    bytes_bounds_phase: int
    bytes_logits_phase: int
    phase_latencies: dict
    omega_comm: float

    @property
    def bytes_total(self) -> int:
        return self.bytes_bounds_phase + self.bytes_logits_phase


def make_plan(
    index: ClusterIndex,
    n_workers: int,
    strategy: str = "round_robin",
    hotness: np.ndarray | None = None,
    seed: int = 0,
) -> ShardPlan:
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    C = index.n_clusters

    if strategy == "round_robin":
        assignment = np.arange(C, dtype=np.int64) % n_workers
    elif strategy == "hotness_weighted":
        if hotness is None:
            raise ValueError("hotness_weighted needs per-cluster hotness weights")
        hotness = as_f64(hotness)
        if hotness.shape != (C,):
            raise ValueError(f"hotness must have length C={C}")
        assignment = np.empty(C, dtype=np.int64)
        worker_weight = np.zeros(n_workers)
        # heaviest first, ties to the lower cluster id, always onto the lightest worker
        for c in np.lexsort((np.arange(C), -hotness)):
            g = int(np.argmin(worker_weight))
            assignment[c] = g
            worker_weight[g] += hotness[c]
    else:  # semantic_grouped: cluster the centroids themselves into N groups
        if n_workers == 1:
            assignment = np.zeros(C, dtype=np.int64)
        elif n_workers >= C:
            assignment = np.arange(C, dtype=np.int64)
        else:
            rng = np.random.default_rng(seed)
            assignment = _lloyd(
                as_f64(index.centroids), n_workers, iters=16, rng=rng, spherical=False
            ).astype(np.int64)

    loads = np.zeros(n_workers, dtype=np.int64)
    np.add.at(loads, assignment, index.sizes)
    return ShardPlan(
        n_workers=n_workers,
        strategy=strategy,
        assignment=assignment,
        loads=loads,
        sigma_load=float(loads.std()),
    )


def sharded_decode_step(
    table: EmbeddingTable,
    index: ClusterIndex,
    plan: ShardPlan,
    h: np.ndarray,
    cfg: DecodeConfig,
    k_max: int | None = None,
    latency: LatencyModel = LatencyModel(),
) -> tuple[DecodeOutcome, CommLedger]:
    _check_table_index(table, index)
    cfg.validate(index.vocab_size)
    if plan.assignment.shape != (index.n_clusters,):
        raise ValueError("plan does not cover this index")
    k_max = cfg.resolved_k_max(index.vocab_size) if k_max is None else k_max

    h = as_f64(h)
    d = index.hidden_dim
    C = index.n_clusters
    N = plan.n_workers
    query_norm = l2_norm(h if index.mode != "bias_augmented" else np.concatenate([h, [1.0]]))

    # phase 1: every worker bounds its own clusters, then a global merge
    bounds_dim = d + (1 if index.mode == "bias_augmented" else 0)
    raw = np.empty(C)
    bound_flops = np.zeros(N)
    for g in range(N):
        mine = plan.clusters_of(g)
        if mine.size:
            raw[mine] = raw_bounds_subset(index, h, query_norm, mine)
        bound_flops[g] = 2 * mine.size * bounds_dim
    eta = _slack_for(raw, cfg.slack_mode)
    bounds = BoundVector(values=raw + eta, mode=index.mode, query_norm=query_norm, slack=eta)

    # phase 2: global selection, per-worker sparse GEMV, merge in selection order
    ctx = _StepContext(table, index, h, cfg, k_max, bounds=bounds)
    selected = _select_by_bound(ctx._order, index.sizes, k_max)
    ctx._cursor = len(selected)
    for c in selected:
        ctx.open_cluster(c)

    # phase 3: one verification pass, escalating on failure
    status = ctx.check_targets(cfg.epsilon)
    if status is not None:
        outcome = ctx.outcome(status, None)
    else:
        outcome = _run_fallback_chain(ctx)

    if outcome.fallback_used == "full_vocab":
        tokens_per_worker = plan.loads.astype(np.float64)
    else:
        tokens_per_worker = np.zeros(N)
        for c in ctx.state.opened:
            tokens_per_worker[plan.assignment[c]] += index.sizes[c]
    sparse_flops = 2 * tokens_per_worker * d

    exchanging = N >= 2
    bytes_bounds = C * 4 if exchanging else 0
    bytes_logits = outcome.stats.sub_size * (d * 2 + 4) if exchanging else 0

    t_bounds_comm = bytes_bounds / latency.bytes_per_unit
    t_logits_comm = bytes_logits / latency.bytes_per_unit
    phase_latencies = {
        "bounds": float(bound_flops.max()) / latency.flops_per_unit + t_bounds_comm,
        "logits": float(sparse_flops.max()) / latency.flops_per_unit + t_logits_comm,
        "verify": 0.0,
    }
    total = sum(phase_latencies.values())
    comm = t_bounds_comm + t_logits_comm
    ledger = CommLedger(
        bytes_bounds_phase=bytes_bounds,
        bytes_logits_phase=bytes_logits,
        phase_latencies=phase_latencies,
        omega_comm=comm / total if total > 0 else 0.0,
    )
    return outcome, ledger


def save_plan(plan: ShardPlan, path) -> None:
    doc = {
        "n_workers": plan.n_workers,
        "strategy": plan.strategy,
        "assignment": [int(x) for x in plan.assignment],
        "loads": [int(x) for x in plan.loads],
        "sigma_load": plan.sigma_load,
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def load_plan(path) -> ShardPlan:
    with open(path) as f:
        doc = json.load(f)
    return ShardPlan(
        n_workers=int(doc["n_workers"]),
        strategy=str(doc["strategy"]),
        assignment=np.asarray(doc["assignment"], dtype=np.int64),
        loads=np.asarray(doc["loads"], dtype=np.int64),
        sigma_load=float(doc["sigma_load"]),
    )
