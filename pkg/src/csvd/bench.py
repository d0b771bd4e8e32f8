"""Workload generation, oracle-validated runs, and report emission.

Every benchmark step is validated against the dense oracle: gathered
logits must match bit for bit, a top-k certificate must reproduce the
oracle's top-k set, a softmax certificate must beat its stated TV budget,
and a top-p certificate must cap the true external mass.  A violation is
a correctness bug, so the run aborts with a diagnostic record rather than
averaging it away.

Reports are pure functions of the spec (seeds included), so two runs with
the same spec produce byte-identical report.json / report.csv files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from ._linalg import as_f64
from .cluster_index import ClusterIndex, build_index, default_cluster_count
from .decode import (
    AdaptiveBudget,
    DecodeConfig,
    DecodeOutcome,
    FullVocab,
    PartialExpand,
    RelaxEps,
    decode_step,
    decode_step_batchselect,
    flop_report,
)
from .oracle import dense_logits, external_mass, tv_distance
from .shard_sim import ShardPlan, make_plan, sharded_decode_step
from .tensor_io import EmbeddingTable, synth_vocab

__all__ = [
    "SCHEMA_VERSION",
    "BenchSpec",
    "RunReport",
    "OracleViolation",
    "generate_queries",
    "run_benchmark",
    "benchmark_from_spec",
    "ablation_sweep",
    "write_report",
    "report_json",
    "parse_fallback",
    "format_fallback",
]

SCHEMA_VERSION = 1

CSV_COLUMNS = ("step", "ratio", "xi", "cert_kind", "fallback", "rho", "flops_sparse", "flops_bounds")


class OracleViolation(Exception):
    """A certificate failed against ground truth.  Carries a reproducer record."""

    def __init__(self, record: dict):
        self.record = record
        super().__init__(json.dumps(record, sort_keys=True, default=str))


def parse_fallback(spec: list) -> tuple:
    """["partial_expand:4", "relax_eps:2.0", "full_vocab"] -> level objects."""
    levels = []
    for item in spec:
        name, _, arg = str(item).partition(":")
        if name == "partial_expand":
            levels.append(PartialExpand(int(arg) if arg else 4))
        elif name == "relax_eps":
            levels.append(RelaxEps(float(arg) if arg else 2.0))
        elif name == "full_vocab":
            levels.append(FullVocab())
        else:
            raise ValueError(f"unknown fallback level {item!r}")
    return tuple(levels)


def format_fallback(levels: tuple) -> list:
    out = []
    for lv in levels:
        if isinstance(lv, PartialExpand):
            out.append(f"partial_expand:{lv.delta_c}")
        elif isinstance(lv, RelaxEps):
            out.append(f"relax_eps:{lv.factor}")
        else:
            out.append("full_vocab")
    return out


@dataclass(frozen=True)
class BenchSpec:
    """One schema for config files and for the snapshot embedded in reports."""

    vocab_size: int = 5000
    hidden_dim: int = 64
    n_modes: int = 50
    spread: float = 0.05
    table_seed: int = 1
    n_clusters: int | None = None  # None: 1.5% of the vocabulary
    mode: str = "euclidean"
    iters: int = 32
    bias_depth: int = 3
    index_seed: int = 0
    k: int = 10
    epsilon: float = 0.05
    targets: tuple = ("topk", "softmax_eps")
    k_max: int | None = None
    fallback: tuple = ("partial_expand:4", "relax_eps:2.0", "full_vocab")
    adaptive_enabled: bool = False
    alpha: float = 0.01
    rho_target: float = 0.02
    ema_half_life: float = 100.0
    warmup_steps: int = 4
    warmup_factor: float = 2.0
    n_steps: int = 2000
    query_model: str = "contextual"
    query_noise: float = 0.3
    zipf_exponent: float = 1.1
    query_seed: int = 7
    shard_workers: int | None = None
    shard_strategy: str = "round_robin"
    schema_version: int = SCHEMA_VERSION

    def resolved_clusters(self) -> int:
        if self.n_clusters is None:
            return default_cluster_count(self.vocab_size)
        return self.n_clusters

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            k=self.k,
            epsilon=self.epsilon,
            targets=tuple(self.targets),
            k_max=self.k_max,
            fallback=parse_fallback(list(self.fallback)),
            adaptive_enabled=self.adaptive_enabled,
            alpha=self.alpha,
            rho_target=self.rho_target,
            ema_half_life=self.ema_half_life,
            warmup_steps=self.warmup_steps,
            warmup_factor=self.warmup_factor,
        )

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["targets"] = list(self.targets)
        doc["fallback"] = list(self.fallback)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "targets" in doc:
            doc["targets"] = tuple(doc["targets"])
        if "fallback" in doc:
            doc["fallback"] = tuple(doc["fallback"])
        return cls(**doc)


@dataclass
class RunReport:
    spec: dict
    steps: list
    aggregates: dict
    oracle: dict
    adaptive: dict | None = None
    comm: dict | None = None


def generate_queries(
    n: int,
    hidden_dim: int,
    model: str,
    seed: int,
    centroids: np.ndarray | None = None,
    noise: float = 0.3,
    zipf_exponent: float = 1.1,
) -> np.ndarray:
    """Unit-norm query batch; `contextual` points queries near hot centroids."""
    rng = np.random.default_rng(seed)
    if model == "random":
        q = rng.standard_normal((n, hidden_dim))
    elif model == "contextual":
        if centroids is None:
            raise ValueError("contextual queries need cluster centroids")
        cents = as_f64(centroids)[:, :hidden_dim]
        C = cents.shape[0]
        weights = 1.0 / np.arange(1, C + 1) ** zipf_exponent
        weights /= weights.sum()
        picks = rng.choice(C, size=n, p=weights)
        q = cents[picks] + noise * rng.standard_normal((n, hidden_dim))
    else:
        raise ValueError(f"unknown query model {model!r}")
    norms = np.sqrt((q * q).sum(axis=1))
    norms[norms == 0] = 1.0
    return q / norms[:, None]


def _effective_epsilon(cfg: DecodeConfig, outcome: DecodeOutcome) -> float:
    if outcome.fallback_used == "relax_eps":
        factor = next((lv.factor for lv in cfg.fallback if isinstance(lv, RelaxEps)), 2.0)
        return cfg.epsilon * factor
    return cfg.epsilon


def _outcome_topk(outcome: DecodeOutcome, k: int) -> np.ndarray:
    order = np.lexsort((outcome.token_ids, -outcome.logits))
    return outcome.token_ids[order[:k]]


def _validate_step(table, index, cfg, h, outcome: DecodeOutcome, step: int) -> dict:
    """All oracle checks for one step; raises OracleViolation on any failure."""
    dense = dense_logits(table, h)

    def fail(check: str, **details):
        record = {
            "step": step,
            "check": check,
            "cert_kind": outcome.status.kind,
            "fallback": outcome.fallback_used,
            **details,
        }
        raise OracleViolation(record)

    if not np.array_equal(dense.logits[outcome.token_ids], outcome.logits):
        fail("gather_bit_equality")

    checks = {"gather_bit_equality": True}
    eps_eff = _effective_epsilon(cfg, outcome)
    if outcome.status.kind == "topk_exact":
        ours = np.sort(_outcome_topk(outcome, cfg.k))
        truth = np.sort(dense.topk(cfg.k))
        if not np.array_equal(ours, truth):
            fail("topk_set_equality", ours=ours.tolist(), truth=truth.tolist())
        checks["topk_set_equality"] = True
    elif outcome.status.kind == "softmax_eps":
        tv = tv_distance(dense, outcome.token_ids)
        if abs(tv.tv - tv.residual_ratio) > 1e-9 * max(1.0, abs(tv.tv)):
            fail("tv_identity", tv=tv.tv, ratio=tv.residual_ratio)
        if tv.tv > eps_eff:
            fail("tv_within_epsilon", tv=tv.tv, epsilon=eps_eff)
        if tv.tv > outcome.status.epsilon_achieved:
            fail("tv_within_rho", tv=tv.tv, rho=outcome.status.epsilon_achieved)
        checks["tv_within_epsilon"] = True
    elif outcome.status.kind == "topp_mass":
        mass = external_mass(dense, outcome.token_ids)
        if mass > eps_eff:
            fail("external_mass_within_epsilon", mass=mass, epsilon=eps_eff)
        if mass > outcome.status.epsilon_achieved:
            fail("external_mass_within_bound", mass=mass, bound=outcome.status.epsilon_achieved)
        checks["external_mass_within_epsilon"] = True
    return checks


def _percentile(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q)) if values.size else math.nan


def _aggregate(steps: list, index: ClusterIndex, table: EmbeddingTable) -> dict:
    n = len(steps)
    if n == 0:
        return {"n_steps": 0}
    ratios = np.array([s.ratio for s in steps])
    xis = np.array([s.xi for s in steps])
    xis = xis[np.isfinite(xis)]
    fallbacks = [s.fallback for s in steps]
    sub_sizes = np.array([s.sub_size for s in steps])
    mean_sub = float(sub_sizes.mean())
    bounds_dim = index.hidden_dim + (1 if index.mode == "bias_augmented" else 0)
    proxy = flop_report(
        table.vocab_size, table.hidden_dim, index.n_clusters, int(round(mean_sub)), bounds_dim
    )
    speedup_at_mean = proxy.flops_full / (
        proxy.flops_bounds + 2 * mean_sub * table.hidden_dim
    )
    per_step_proxy = np.array(
        [proxy.flops_full / (s.flops_bounds + s.flops_sparse) for s in steps]
    )
    cert_counts: dict = {}
    for s in steps:
        cert_counts[s.cert_kind] = cert_counts.get(s.cert_kind, 0) + 1
    fallback_counts: dict = {}
    for f in fallbacks:
        key = f if f is not None else "none"
        fallback_counts[key] = fallback_counts.get(key, 0) + 1
    return {
        "n_steps": n,
        "rho_cert": sum(1 for f in fallbacks if f is None) / n,
        "rho_fall": sum(1 for f in fallbacks if f is not None) / n,
        "ratio_mean": float(ratios.mean()),
        "ratio_p50": _percentile(ratios, 50),
        "ratio_p95": _percentile(ratios, 95),
        "xi_mean": float(xis.mean()) if xis.size else math.nan,
        "xi_p50": _percentile(xis, 50),
        "xi_p95": _percentile(xis, 95),
        "sub_size_mean": mean_sub,
        "speedup_proxy_at_mean": speedup_at_mean,
        "speedup_proxy_mean": float(per_step_proxy.mean()),
        "cert_counts": cert_counts,
        "fallback_counts": fallback_counts,
    }


def run_benchmark(
    table: EmbeddingTable,
    index: ClusterIndex,
    cfg: DecodeConfig,
    n_steps: int,
    query_model: str = "contextual",
    seed: int = 7,
    query_noise: float = 0.3,
    zipf_exponent: float = 1.1,
    validate: bool = True,
    variant: str = "incremental",
    shard_plan: ShardPlan | None = None,
    spec_snapshot: dict | None = None,
) -> RunReport:
    cfg.validate(index.vocab_size)
    queries = generate_queries(
        n_steps,
        table.hidden_dim,
        query_model,
        seed,
        centroids=index.centroids,
        noise=query_noise,
        zipf_exponent=zipf_exponent,
    )
    budget = AdaptiveBudget(cfg, index.vocab_size)
    steps: list = []
    ema_trace: list = []
    k_trace: list = []
    comm_bytes = 0
    omega_sum = 0.0
    validated = 0
    hasher = hashlib.sha256()

    for t in range(n_steps):
        h = queries[t]
        k_eff = budget.effective_k_max(t)
        if shard_plan is not None:
            outcome, ledger = sharded_decode_step(table, index, shard_plan, h, cfg, k_max=k_eff)
            comm_bytes += ledger.bytes_total
            omega_sum += ledger.omega_comm
        elif variant == "batchselect":
            outcome = decode_step_batchselect(table, index, h, cfg, k_max=k_eff)
        else:
            outcome = decode_step(table, index, h, cfg, k_max=k_eff)
        budget.observe(outcome.fallback_used is not None)
        ema_trace.append(budget.ema)
        k_trace.append(budget.k_max)
        hasher.update(outcome.token_ids.tobytes())
        hasher.update(outcome.logits.tobytes())
        hasher.update(outcome.status.kind.encode())
        hasher.update((outcome.fallback_used or "none").encode())
        if validate:
            _validate_step(table, index, cfg, h, outcome, t)
            validated += 1
        outcome.stats.step = t
        steps.append(outcome.stats)

    spec = dict(spec_snapshot) if spec_snapshot is not None else {}
    spec.setdefault("schema_version", SCHEMA_VERSION)
    spec.setdefault("query_model", query_model)
    spec.setdefault("query_seed", seed)
    report = RunReport(
        spec=spec,
        steps=steps,
        aggregates=_aggregate(steps, index, table),
        oracle={"steps_validated": validated, "violations": 0},
        adaptive={
            "enabled": cfg.adaptive_enabled,
            "ema": ema_trace,
            "k_max": k_trace,
        },
    )
    report.aggregates["index"] = {
        "n_clusters": index.n_clusters,
        "mode": index.mode,
        "mean_radius": float(index.radii.mean()),
        "max_radius": float(index.radii.max()),
    }
    report.aggregates["outcome_sha256"] = hasher.hexdigest()
    if shard_plan is not None:
        report.comm = {
            "n_workers": shard_plan.n_workers,
            "strategy": shard_plan.strategy,
            "sigma_load": shard_plan.sigma_load,
            "bytes_total": comm_bytes,
            "omega_comm_mean": omega_sum / n_steps if n_steps else 0.0,
        }
    return report


def benchmark_from_spec(spec: BenchSpec, validate: bool = True) -> RunReport:
    """Build the synthetic workload a spec describes and run it."""
    table = synth_vocab(
        spec.vocab_size, spec.hidden_dim, spec.n_modes, spec.spread, spec.table_seed
    )
    index = build_index(
        table,
        spec.resolved_clusters(),
        mode=spec.mode,
        iters=spec.iters,
        m=spec.bias_depth,
        seed=spec.index_seed,
    )
    plan = None
    if spec.shard_workers is not None:
        hotness = None
        if spec.shard_strategy == "hotness_weighted":
            hotness = index.sizes.astype(np.float64)
        plan = make_plan(index, spec.shard_workers, spec.shard_strategy, hotness=hotness)
    return run_benchmark(
        table,
        index,
        spec.decode_config(),
        spec.n_steps,
        query_model=spec.query_model,
        seed=spec.query_seed,
        query_noise=spec.query_noise,
        zipf_exponent=spec.zipf_exponent,
        validate=validate,
        shard_plan=plan,
        spec_snapshot=spec.to_dict(),
    )


_AXIS_FIELDS = {
    "C": "n_clusters",
    "epsilon": "epsilon",
    "K_max": "k_max",
    "bound_mode": "mode",
    "shard_N": "shard_workers",
}


def ablation_sweep(axis: str, values, base: BenchSpec, validate: bool = True) -> list:
    """Run the base spec once per axis value on an identical step stream.

    Returns [(value, RunReport), ...] in the given order.
    """
    if axis not in _AXIS_FIELDS:
        raise ValueError(f"unknown axis {axis!r}, expected one of {sorted(_AXIS_FIELDS)}")
    out = []
    for value in values:
        spec = replace(base, **{_AXIS_FIELDS[axis]: value})
        out.append((value, benchmark_from_spec(spec, validate=validate)))
    return out


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def report_json(report: RunReport) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "spec": report.spec,
        "aggregates": report.aggregates,
        "oracle": report.oracle,
        "adaptive": report.adaptive,
        "comm": report.comm,
        "steps": [dataclasses.asdict(s) for s in report.steps],
    }
    return json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n"


def write_report(report: RunReport, out_dir) -> tuple:
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    csv_path = os.path.join(out_dir, "report.csv")
    with open(json_path, "w") as f:
        f.write(report_json(report))
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for s in report.steps:
            writer.writerow(
                [
                    s.step,
                    repr(s.ratio),
                    repr(s.xi),
                    s.cert_kind,
                    s.fallback if s.fallback is not None else "none",
                    repr(s.rho),
                    s.flops_sparse,
                    s.flops_bounds,
                ]
            )
    return json_path, csv_path
