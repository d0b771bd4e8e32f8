"""Command-line surface.

Exit codes: 0 success, 1 a validation or certification bug was found,
2 usage error, 3 I/O error.  Every subcommand is deterministic given its
flags and seeds.  CSVD_THREADS caps worker parallelism (0 = auto); the
current engine executes sequentially, so the value is validated and
recorded but changes nothing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .bench import (
    BenchSpec,
    OracleViolation,
    benchmark_from_spec,
    write_report,
)
from .cluster_index import (
    FingerprintMismatchError,
    build_index,
    default_cluster_count,
    load_index,
    save_index,
    validate_index,
)
from .decode import ConfigError
from .tensor_io import (
    FormatError,
    load_embedding_table,
    save_embedding_table,
    synth_vocab,
)
from .verify import full_suite

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


def thread_cap() -> int:
    """Parallelism cap from CSVD_THREADS; 0 means auto."""
    raw = os.environ.get("CSVD_THREADS", "0")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CSVD_THREADS must be an integer, got {raw!r}") from exc
    if value < 0:
        raise ConfigError("CSVD_THREADS must be >= 0")
    return value


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csvd",
        description="Certified sub-vocabulary decoding: offline clustering, "
        "verification, and benchmark harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding table file")
    p.add_argument("--out", required=True, help="output CSVD table path")
    p.add_argument("--V", type=int, default=5000, help="vocabulary size")
    p.add_argument("--d", type=int, default=64, help="hidden dimension")
    p.add_argument("--modes", type=int, default=50, help="number of mixture modes")
    p.add_argument("--spread", type=float, default=0.05, help="per-mode noise scale")
    p.add_argument("--seed", type=int, default=1, help="generator seed")

    p = sub.add_parser("cluster", help="build and validate a cluster index")
    p.add_argument("--input", required=True, help="CSVD table path")
    p.add_argument("--out", required=True, help="output CSVI index path")
    p.add_argument("--C", type=int, default=None, help="cluster count (default 1.5%% of V)")
    p.add_argument(
        "--mode",
        choices=("euclidean", "spherical", "bias_augmented"),
        default="euclidean",
        help="clustering mode",
    )
    p.add_argument("--iters", type=int, default=32, help="Lloyd iteration cap")
    p.add_argument("--m", type=int, default=3, help="bias table depth")
    p.add_argument("--seed", type=int, default=0, help="seeding RNG")

    p = sub.add_parser("verify", help="run the full soundness suite")
    p.add_argument("--table", required=True, help="CSVD table path")
    p.add_argument("--index", required=True, help="CSVI index path")
    p.add_argument("--steps", type=int, default=200, help="certified decode steps to check")
    p.add_argument("--queries", type=int, default=200, help="bound-soundness queries")
    p.add_argument("--seed", type=int, default=0, help="suite seed")

    for name in ("bench", "shard-sim"):
        p = sub.add_parser(
            name,
            help="run the benchmark harness" if name == "bench" else "run the sharded workflow",
        )
        p.add_argument("--table", default=None, help="CSVD table path (default: synthesize)")
        p.add_argument("--synth", action="store_true", help="synthesize the table in-process")
        p.add_argument("--config", default=None, help="JSON config file (BenchSpec schema)")
        p.add_argument("--out", default=None, help="output directory for report.json/report.csv")
        p.add_argument("--steps", type=int, default=None, help="number of decode steps")
        p.add_argument("--V", type=int, default=None)
        p.add_argument("--d", type=int, default=None)
        p.add_argument("--C", type=int, default=None)
        p.add_argument("--mode", choices=("euclidean", "spherical", "bias_augmented"), default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--k-max", type=int, default=None)
        p.add_argument("--query-model", choices=("contextual", "random"), default=None)
        p.add_argument("--seed", type=int, default=None, help="query seed")
        p.add_argument("--no-validate", action="store_true", help="skip the per-step oracle")
        if name == "shard-sim":
            p.add_argument("--N", type=int, required=True, help="logical worker count")
            p.add_argument(
                "--strategy",
                choices=("round_robin", "hotness_weighted", "semantic_grouped"),
                default="round_robin",
            )
    return parser


def _cmd_synth(args) -> int:
    table = synth_vocab(args.V, args.d, args.modes, args.spread, args.seed)
    save_embedding_table(table, args.out)
    print(f"wrote {args.out}: V={table.vocab_size} d={table.hidden_dim}")
    return EXIT_OK


def _cmd_cluster(args) -> int:
    table = load_embedding_table(args.input)
    C = args.C if args.C is not None else default_cluster_count(table.vocab_size)
    if not 1 <= C <= table.vocab_size:
        print(f"error: need 1 <= C <= V={table.vocab_size}, got {C}", file=sys.stderr)
        return EXIT_USAGE
    index = build_index(table, C, mode=args.mode, iters=args.iters, m=args.m, seed=args.seed)
    report = validate_index(index, table)
    if not report.ok:
        print(f"BUILD BUG: {len(report.violations)} validation violations", file=sys.stderr)
        for v in report.violations[:5]:
            print(f"  {v.kind} cluster={v.cluster}: {v.message}", file=sys.stderr)
        return EXIT_VIOLATION
    save_index(index, args.out)
    sizes = index.sizes
    print(
        f"wrote {args.out}: C={index.n_clusters} mode={index.mode} "
        f"mean_radius={index.radii.mean():.6f} max_radius={index.radii.max():.6f} "
        f"sizes[min={sizes.min()},max={sizes.max()}]"
    )
    return EXIT_OK


def _cmd_verify(args) -> int:
    table = load_embedding_table(args.table)
    index = load_index(args.index)
    try:
        results = full_suite(
            table, index, n_queries=args.queries, n_steps=args.steps, seed=args.seed
        )
    except FingerprintMismatchError as exc:
        print(f"VIOLATION: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    total = 0
    for check, violations in results.items():
        print(f"{check}: {len(violations)} violations")
        total += len(violations)
    if total:
        first = next(v for vs in results.values() for v in vs)
        print("reproducer:", json.dumps(first, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_VIOLATION
    print("0 violations")
    return EXIT_OK


_SPEC_FLAGS = {
    "steps": "n_steps",
    "V": "vocab_size",
    "d": "hidden_dim",
    "C": "n_clusters",
    "mode": "mode",
    "k": "k",
    "epsilon": "epsilon",
    "k_max": "k_max",
    "query_model": "query_model",
    "seed": "query_seed",
}


def _spec_from_args(args, shard: bool) -> BenchSpec:
    # precedence: flags > config file > defaults
    doc: dict = {}
    if args.config is not None:
        with open(args.config) as f:
            doc.update(json.load(f))
    for flag, field_name in _SPEC_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[field_name] = value
    if shard:
        doc["shard_workers"] = args.N
        doc["shard_strategy"] = args.strategy
    return BenchSpec.from_dict(doc)


def _cmd_bench(args, shard: bool) -> int:
    if args.table is not None and not args.synth:
        # external tables enter through the same spec mechanism once loaded;
        # the spec snapshot records the path instead of synthesis parameters
        table = load_embedding_table(args.table)
        spec = _spec_from_args(args, shard)
        spec = dataclasses.replace(
            spec, vocab_size=table.vocab_size, hidden_dim=table.hidden_dim
        )
        from .bench import run_benchmark
        from .shard_sim import make_plan

        index = build_index(
            table, spec.resolved_clusters(), mode=spec.mode, iters=spec.iters,
            m=spec.bias_depth, seed=spec.index_seed,
        )
        plan = None
        if spec.shard_workers is not None:
            hotness = index.sizes.astype(np.float64)
            plan = make_plan(index, spec.shard_workers, spec.shard_strategy, hotness=hotness)
        snapshot = spec.to_dict()
        snapshot["table_path"] = args.table
        report = run_benchmark(
            table,
            index,
            spec.decode_config(),
            spec.n_steps,
            query_model=spec.query_model,
            seed=spec.query_seed,
            query_noise=spec.query_noise,
            zipf_exponent=spec.zipf_exponent,
            validate=not args.no_validate,
            shard_plan=plan,
            spec_snapshot=snapshot,
        )
    else:
        spec = _spec_from_args(args, shard)
        report = benchmark_from_spec(spec, validate=not args.no_validate)

    agg = report.aggregates
    print(
        f"steps={agg.get('n_steps', 0)} rho_cert={agg.get('rho_cert', float('nan')):.4f} "
        f"rho_fall={agg.get('rho_fall', float('nan')):.4f} "
        f"ratio_mean={agg.get('ratio_mean', float('nan')):.4f} "
        f"speedup_proxy={agg.get('speedup_proxy_at_mean', float('nan')):.3f}"
    )
    if report.comm is not None:
        print(
            f"shard: N={report.comm['n_workers']} strategy={report.comm['strategy']} "
            f"omega_comm={report.comm['omega_comm_mean']:.4f}"
        )
    print(f"outcome_sha256={agg.get('outcome_sha256', '')}")
    if args.out is not None:
        json_path, csv_path = write_report(report, args.out)
        print(f"wrote {json_path} and {csv_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        thread_cap()
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "cluster":
            return _cmd_cluster(args)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "bench":
            return _cmd_bench(args, shard=False)
        if args.command == "shard-sim":
            return _cmd_bench(args, shard=True)
        parser.error(f"unknown command {args.command!r}")
    except OracleViolation as exc:
        print("CERTIFICATION BUG:", json.dumps(exc.record, sort_keys=True, default=str),
              file=sys.stderr)
        return EXIT_VIOLATION
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
