"""Soundness suite: the brute-force checks behind `csvd verify`.

Each check returns a list of dict reproducers (empty means clean), so the
CLI can dump the first failure verbatim and the tests can assert on exact
counts.  Nothing here shares code with the paths it checks beyond the
fixed-order kernels, which is the point.
"""

from __future__ import annotations

import numpy as np

from ._linalg import logsumexp
from .bounds import cluster_bounds
from .cluster_index import ClusterIndex, validate_index
from .decode import DecodeConfig, decode_step_batchselect
from .oracle import DenseResult, dense_logits, tv_distance
from .shard_sim import make_plan, sharded_decode_step
from .tensor_io import EmbeddingTable

__all__ = [
    "bound_soundness_check",
    "tv_identity_check",
    "shard_transparency_check",
]


def bound_soundness_check(
    table: EmbeddingTable,
    index: ClusterIndex,
    queries: np.ndarray,
    max_reports: int = 10,
) -> list:
    """Assert logit_i <= U_c for every (query, cluster, member); no tolerance.

    Member logits come from the dense oracle; cluster maxima are taken with
    maximum.reduceat over the contiguous permuted ranges.
    """
    violations = []
    perm = index.perm
    starts = index.starts
    for qi, h in enumerate(np.asarray(queries, dtype=np.float64)):
        dense = dense_logits(table, h)
        bounds = cluster_bounds(index, h)
        seg_max = np.maximum.reduceat(dense.logits[perm], starts)
        bad = np.flatnonzero(seg_max > bounds.values)
        for c in bad:
            lo, hi = index.starts[c], index.ends[c]
            local = int(np.argmax(dense.logits[perm[lo:hi]]))
            token = int(perm[lo + local])
            violations.append(
                {
                    "check": "bound_soundness",
                    "query": qi,
                    "cluster": int(c),
                    "token": token,
                    "logit": float(dense.logits[token]),
                    "bound": float(bounds.values[c]),
                    "mode": index.mode,
                }
            )
            if len(violations) >= max_reports:
                return violations
    return violations


def tv_identity_check(n_instances: int, seed: int, rel_tol: float = 1e-9) -> list:
    """Direct-sum TV must equal R/(Z_S+R) on random (logits, subset) pairs."""
    rng = np.random.default_rng(seed)
    violations = []
    for i in range(n_instances):
        V = int(rng.integers(3, 2000))
        logits = rng.normal(0.0, 3.0, size=V)
        sub_size = int(rng.integers(1, V))
        sub_ids = rng.permutation(V)[:sub_size]
        lse = logsumexp(logits)
        full = DenseResult(
            logits=logits,
            probs=np.exp(logits - lse),
            order=np.lexsort((np.arange(V), -logits)),
        )
        tv = tv_distance(full, sub_ids)
        if abs(tv.tv - tv.residual_ratio) > rel_tol * max(1.0, abs(tv.tv)):
            violations.append(
                {
                    "check": "tv_identity",
                    "instance": i,
                    "tv": tv.tv,
                    "ratio": tv.residual_ratio,
                }
            )
    return violations


def shard_transparency_check(
    table: EmbeddingTable,
    index: ClusterIndex,
    cfg: DecodeConfig,
    queries: np.ndarray,
    worker_counts=(1, 2, 4),
    strategies=("round_robin",),
) -> list:
    """Sharded outcomes must be bit-identical to the one-shot single-worker step."""
    violations = []
    plans = []
    for n in worker_counts:
        for strategy in strategies:
            hotness = index.sizes.astype(np.float64) if strategy == "hotness_weighted" else None
            plans.append(make_plan(index, n, strategy, hotness=hotness))
    for qi, h in enumerate(np.asarray(queries, dtype=np.float64)):
        reference = decode_step_batchselect(table, index, h, cfg)
        for plan in plans:
            outcome, ledger = sharded_decode_step(table, index, plan, h, cfg)
            same = (
                np.array_equal(outcome.token_ids, reference.token_ids)
                and np.array_equal(outcome.logits, reference.logits)
                and outcome.status == reference.status
                and outcome.fallback_used == reference.fallback_used
            )
            if not same:
                violations.append(
                    {
                        "check": "shard_transparency",
                        "query": qi,
                        "n_workers": plan.n_workers,
                        "strategy": plan.strategy,
                    }
                )
            expected_bytes = index.n_clusters * 4 if plan.n_workers >= 2 else 0
            if ledger.bytes_bounds_phase != expected_bytes:
                violations.append(
                    {
                        "check": "bounds_bytes",
                        "query": qi,
                        "n_workers": plan.n_workers,
                        "got": ledger.bytes_bounds_phase,
                        "expected": expected_bytes,
                    }
                )
    return violations


def random_unit_queries(n: int, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, d))
    norms = np.sqrt((q * q).sum(axis=1))
    norms[norms == 0] = 1.0
    return q / norms[:, None]


def full_suite(
    table: EmbeddingTable,
    index: ClusterIndex,
    n_queries: int = 200,
    n_steps: int = 200,
    seed: int = 0,
) -> dict:
    """Everything `csvd verify` runs; returns {check_name: violations}."""
    from .bench import OracleViolation, run_benchmark

    results: dict = {}
    report = validate_index(index, table)
    results["index_validation"] = [
        {"check": "index_validation", "kind": v.kind, "cluster": v.cluster, "message": v.message}
        for v in report.violations
    ]
    queries = random_unit_queries(n_queries, table.hidden_dim, seed)
    results["bound_soundness"] = bound_soundness_check(table, index, queries)
    results["tv_identity"] = tv_identity_check(100, seed + 1)

    cfg = DecodeConfig(k=min(10, table.vocab_size), epsilon=0.05)
    try:
        run_benchmark(
            table, index, cfg, n_steps, query_model="random", seed=seed + 2, validate=True
        )
        results["certified_steps"] = []
    except OracleViolation as exc:
        results["certified_steps"] = [exc.record]

    step_queries = random_unit_queries(min(20, max(1, n_steps)), table.hidden_dim, seed + 3)
    results["shard_transparency"] = shard_transparency_check(
        table, index, cfg, step_queries
    )
    return results
