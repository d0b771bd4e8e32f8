"""Certified sub-vocabulary decoding for large output layers.

Cluster the output-layer rows offline, then at each decoding step use
centroid-plus-radius bounds to open only the clusters that can matter,
with machine-checkable certificates: exact top-k, bounded-TV softmax, and
top-p mass coverage.  A dense oracle, a deterministic shard simulation,
and a benchmark harness round out the toolkit.
"""

from .bench import (
    BenchSpec,
    OracleViolation,
    RunReport,
    ablation_sweep,
    benchmark_from_spec,
    generate_queries,
    run_benchmark,
    write_report,
)
from .bounds import (
    BoundVector,
    cluster_bounds,
    euclidean_bounds,
    refined_bias_bound,
    spherical_bounds,
)
from .certify import (
    CertState,
    CertStatus,
    residual_log_rhat,
    softmax_eps_certified,
    tightness,
    topk_certified,
    topp_certified,
)
from .cluster_index import (
    ClusterIndex,
    ClusterMeta,
    FingerprintMismatchError,
    ValidationReport,
    build_index,
    default_cluster_count,
    load_index,
    save_index,
    validate_index,
)
from .decode import (
    AdaptiveBudget,
    ConfigError,
    DecodeConfig,
    DecodeOutcome,
    FullVocab,
    PartialExpand,
    RelaxEps,
    StepMetrics,
    adapt_budget,
    apply_fallback,
    decode_step,
    decode_step_batchselect,
    flop_accounting,
    flop_report,
    warmup_k_max,
)
from .oracle import DenseResult, dense_logits, external_mass, tv_distance
from .shard_sim import (
    CommLedger,
    LatencyModel,
    ShardPlan,
    load_plan,
    make_plan,
    save_plan,
    sharded_decode_step,
)
from .tensor_io import (
    BadMagicError,
    EmbeddingTable,
    FormatError,
    NonFiniteEntryError,
    QueryBatch,
    TruncatedPayloadError,
    VersionMismatchError,
    load_embedding_table,
    load_query_batch,
    save_embedding_table,
    save_query_batch,
    synth_vocab,
    table_fingerprint,
)

__version__ = "0.1.0"
