"""Hierarchical top-p sparse attention over a clustered KV cache.

Prefill keys are grouped into clusters per layer and KV head; each decode
step estimates the attention mass of every cluster from its centroid and
size, keeps the minimal top-p set of clusters, computes the heaviest part
of that set exactly, and approximates the rest by cluster summaries under
one shared softmax normalizer.
"""

from .clustering import (
    Cluster,
    ClusteredCache,
    KMeansResult,
    build_clustered_cache,
    default_cluster_count,
    kmeans_fit,
)
from .engine import (
    PRESETS,
    AttentionOutput,
    ClusterEstimate,
    DoublePConfig,
    SelectionPlan,
    baseline_cluster_topk,
    baseline_token_topk,
    baseline_token_topp_fixed_budget,
    build_cache_for_config,
    decode_step,
    estimate_cluster_distribution,
    full_attention,
    full_attention_weights,
    mixed_attention,
    plan_selection,
    sparse_attention,
    true_token_weights,
)
from .kernels import BACKEND
from .kvcache import DumpFormatError, KvCache, QueryTrace, read_dump, write_dump
from .metrics import (
    ExperimentRecord,
    adaptive_token_budget,
    cluster_approx_error,
    min_clusters_for_error,
    output_error,
    recovered_mass,
    violation_rate,
)
from .selection import TopPResult, top_k_select, top_p_select, top_p_select_sorted
from .workload import PROFILES, WorkloadSpec, generate, profile_for_head

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput",
    "BACKEND",
    "Cluster",
    "ClusterEstimate",
    "ClusteredCache",
    "DoublePConfig",
    "DumpFormatError",
    "ExperimentRecord",
    "KMeansResult",
    "KvCache",
    "PRESETS",
    "PROFILES",
    "QueryTrace",
    "SelectionPlan",
    "TopPResult",
    "WorkloadSpec",
    "adaptive_token_budget",
    "baseline_cluster_topk",
    "baseline_token_topk",
    "baseline_token_topp_fixed_budget",
    "build_cache_for_config",
    "build_clustered_cache",
    "cluster_approx_error",
    "decode_step",
    "default_cluster_count",
    "estimate_cluster_distribution",
    "full_attention",
    "full_attention_weights",
    "generate",
    "kmeans_fit",
    "min_clusters_for_error",
    "mixed_attention",
    "output_error",
    "plan_selection",
    "profile_for_head",
    "read_dump",
    "recovered_mass",
    "sparse_attention",
    "top_k_select",
    "top_p_select",
    "top_p_select_sorted",
    "true_token_weights",
    "violation_rate",
    "write_dump",
]
