"""Decode-step pipeline: cluster-mass estimation, two-stage top-p
selection, and mixed exact/approximate attention, plus the dense oracle
and the fixed-budget baselines.

One decode step for a query q against a clustered cache runs three stages:

1. Estimate the per-cluster attention mass from centroid logits shifted by
   log cluster size; softmax of those shifted logits is the estimated
   cluster distribution.
2. Take the minimal top-p set of clusters reaching mass p1; renormalize
   the estimate inside that set and take a second top-p cut at p2. The
   second cut's clusters get exact token-level attention, the remainder of
   the first set is approximated by its centroid summary, and everything
   outside the first set is dropped.
3. Combine both kinds of contribution under one shared normalizer: the sum
   of exact token exponentials plus the approximate cluster masses. Sink
   and window tokens are always folded in exactly.

Every operation is a pure function of its inputs; (layer, head, step) work
items are independent.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .clustering import ClusteredCache, build_clustered_cache, default_cluster_count
from .kvcache import KvCache
from .selection import TopPResult, top_k_select, top_p_select, top_p_select_sorted


@dataclass(frozen=True)
class DoublePConfig:
    """Thresholds and geometry for a decode run.

    p1: stage-1 cluster mass threshold; p2: fraction of the retained mass
    computed exactly. p2 > p1 is legal. clusters, if given, fixes the
    per-head cluster count; otherwise tokens_per_cluster sets the average
    cluster size.
    """

    p1: float
    p2: float
    sink: int = 4
    window: int = 64
    clusters: int | None = None
    tokens_per_cluster: int = 32

    def __post_init__(self):
        for name, val in (("p1", self.p1), ("p2", self.p2)):
            if not 0.0 < val <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {val}")
        if self.sink < 0 or self.window < 0:
            raise ValueError("sink and window must be >= 0")

    def cluster_count_for(self, middle_len):
        if self.clusters is not None:
            return self.clusters
        return default_cluster_count(middle_len, self.tokens_per_cluster)


# Named threshold presets: (p1, p2) pairs balancing accuracy and compute.
PRESETS = {
    "llama-default": (0.95, 0.7),
    "qwen-default": (0.99, 0.8),
}


@dataclass(frozen=True)
class ClusterEstimate:
    """Estimated cluster-level attention distribution for one head.

    log_masses[i] = centroid logit + log(size): the log of the size-scaled
    centroid exponential that stands in for the cluster's true exponential
    mass. probs is its softmax; order sorts clusters by probs descending
    (lower index first on ties).
    """

    log_masses: np.ndarray
    probs: np.ndarray
    order: np.ndarray
    cc: ClusteredCache
    layer: int
    kv_head: int


@dataclass(frozen=True)
class SelectionPlan:
    """Two-stage selection outcome.

    stage1 holds the retained cluster set; exact_clusters / approx_clusters
    partition it. exact_tokens is the union of sink tokens, window tokens,
    and all members of exact_clusters, ascending.
    """

    stage1: TopPResult
    exact_clusters: np.ndarray
    approx_clusters: np.ndarray
    exact_tokens: np.ndarray
    estimate: ClusterEstimate
    config: DoublePConfig


@dataclass(frozen=True)
class AttentionOutput:
    """Attention result with its normalizer and compute footprint."""

    output: np.ndarray        # float64[d]
    normalizer: float         # shared mass: exact exponentials + approx masses
    exact_token_count: int
    approx_cluster_count: int


def _check_query(q, d):
    q = np.asarray(q)
    if q.shape != (d,):
        raise ValueError(f"dimension mismatch: query {q.shape}, head_dim {d}")
    return q


def full_attention_weights(q, cache, layer, kv_head):
    """True attention distribution over all cached tokens.

    Returns (weights float64[N], log normalizer).
    """
    q = _check_query(q, cache.head_dim)
    logits = kernels.scaled_logits(
        cache.keys[layer, kv_head], q, 1.0 / np.sqrt(cache.head_dim)
    )
    lse = kernels.logsumexp(logits)
    return np.exp(logits - lse), lse


def full_attention(q, cache, layer, kv_head):
    """Exact softmax attention over every cached token (the oracle)."""
    weights, lse = full_attention_weights(q, cache, layer, kv_head)
    out = kernels.weighted_sum(weights, cache.values[layer, kv_head])
    return AttentionOutput(
        output=out,
        normalizer=float(np.exp(lse)),
        exact_token_count=cache.context_len,
        approx_cluster_count=0,
    )


def true_token_weights(q, cc, layer, kv_head):
    """Like full_attention_weights but over the grown token range
    (prefill cache plus any appended decode tokens)."""
    q = _check_query(q, cc.source.head_dim)
    positions = np.arange(cc.total_tokens, dtype=np.int64)
    rows = cc.gather_keys(layer, kv_head, positions)
    logits = kernels.scaled_logits(rows, q, 1.0 / np.sqrt(cc.source.head_dim))
    lse = kernels.logsumexp(logits)
    return np.exp(logits - lse), lse


def estimate_cluster_distribution(q, cc, layer, kv_head):
    """Size-weighted centroid softmax: the estimated cluster distribution."""
    data = cc.estimation_data(layer, kv_head)
    if len(data.clusters) == 0:
        raise ValueError("no clusters for this head")
    q = _check_query(q, cc.source.head_dim)
    log_masses = (
        kernels.scaled_logits(data.centroids, q, 1.0 / np.sqrt(cc.source.head_dim))
        + data.log_sizes
    )
    probs = kernels.softmax(log_masses)
    order = np.argsort(-probs, kind="stable")
    return ClusterEstimate(
        log_masses=log_masses,
        probs=probs,
        order=order,
        cc=cc,
        layer=layer,
        kv_head=kv_head,
    )


def plan_selection(est, cfg):
    """Two-stage top-p over an estimated cluster distribution.

    Stage 1 keeps the minimal cluster set whose estimated mass reaches p1.
    Stage 2 renormalizes the estimate inside that set and keeps the minimal
    subset reaching p2 of the retained mass; those clusters are computed
    exactly, the rest of stage 1 is approximated, clusters outside stage 1
    contribute nothing.
    """
    stage1 = top_p_select(est.probs, cfg.p1)
    cp = stage1.selected
    sub = est.probs[cp]
    exact_count = len(top_p_select(sub, cfg.p2).selected)
    exact_clusters = cp[:exact_count]
    approx_clusters = cp[exact_count:]

    data = est.cc.estimation_data(est.layer, est.kv_head)
    member_blocks = [data.clusters[int(i)].members for i in exact_clusters]
    exact_tokens = np.concatenate(
        [
            est.cc.sink_token_indices(),
            est.cc.window_token_indices(),
            *member_blocks,
        ]
    )
    exact_tokens.sort()
    return SelectionPlan(
        stage1=stage1,
        exact_clusters=exact_clusters,
        approx_clusters=approx_clusters,
        exact_tokens=exact_tokens,
        estimate=est,
        config=cfg,
    )


def mixed_attention(q, cc, layer, kv_head, exact_tokens, approx_clusters, est):
    """Shared-normalizer mixture of exact tokens and approximated clusters.

    The normalizer sums the exact tokens' exponentials and the approximated
    clusters' estimated masses; exact tokens contribute value vectors at
    their exact weights, approximated clusters contribute their value means
    at their estimated mass fraction.
    """
    q = _check_query(q, cc.source.head_dim)
    scale = 1.0 / np.sqrt(cc.source.head_dim)
    exact_tokens = np.asarray(exact_tokens, dtype=np.int64)
    approx_clusters = np.asarray(approx_clusters, dtype=np.int64)

    exact_keys = cc.gather_keys(layer, kv_head, exact_tokens)
    exact_logits = kernels.scaled_logits(exact_keys, q, scale)
    approx_log_masses = est.log_masses[approx_clusters]

    combined = np.concatenate([exact_logits, approx_log_masses])
    log_z = kernels.logsumexp(combined)
    weights = np.exp(combined - log_z)

    out = np.zeros(cc.source.head_dim, dtype=np.float64)
    if exact_tokens.size:
        out += kernels.weighted_sum(
            weights[: exact_tokens.size], cc.gather_values(layer, kv_head, exact_tokens)
        )
    if approx_clusters.size:
        data = cc.estimation_data(layer, kv_head)
        out += kernels.weighted_sum(
            weights[exact_tokens.size :], data.value_means[approx_clusters]
        )
    return AttentionOutput(
        output=out,
        normalizer=float(np.exp(log_z)),
        exact_token_count=int(exact_tokens.size),
        approx_cluster_count=int(approx_clusters.size),
    )


def sparse_attention(q, cache, cc, plan, layer, kv_head):
    """Execute a selection plan: exact attention over the planned tokens,
    centroid approximation for the planned clusters, one shared mass."""
    if cc.source is not cache:
        raise ValueError("plan/cc mismatch: clustered cache built from a different cache")
    if plan.estimate.cc is not cc or plan.estimate.layer != layer or plan.estimate.kv_head != kv_head:
        raise ValueError("plan/cc mismatch: plan was derived for a different head or cache")
    return mixed_attention(
        q, cc, layer, kv_head, plan.exact_tokens, plan.approx_clusters, plan.estimate
    )


def decode_step(q, cache, cc, cfg, layer, kv_head):
    """One full decode step; returns (output, plan, estimate)."""
    if cc.sink != cfg.sink or cc.window != cfg.window:
        raise ValueError(
            "config/cache mismatch: clustered cache was built with "
            f"sink={cc.sink}, window={cc.window}, config has "
            f"sink={cfg.sink}, window={cfg.window}"
        )
    est = estimate_cluster_distribution(q, cc, layer, kv_head)
    plan = plan_selection(est, cfg)
    out = sparse_attention(q, cache, cc, plan, layer, kv_head)
    return out, plan, est


def build_cache_for_config(cache, cfg, seed=0):
    """Cluster a cache according to a config's geometry and count policy."""
    middle = cache.context_len - cfg.sink - cfg.window
    return build_clustered_cache(
        cache,
        k=cfg.cluster_count_for(middle),
        sink=cfg.sink,
        window=cfg.window,
        seed=seed,
    )


def baseline_token_topk(q, cache, budget, layer, kv_head):
    """Idealized fixed-budget baseline: exact attention over the `budget`
    tokens with the largest true weights, renormalized over that subset.

    Returns (output, captured) where captured is the true (unrenormalized)
    attention mass of the subset.
    """
    if not 1 <= budget <= cache.context_len:
        raise ValueError(f"budget must be in [1, {cache.context_len}], got {budget}")
    weights, lse = full_attention_weights(q, cache, layer, kv_head)
    idx = top_k_select(weights, budget)
    captured = float(weights[idx].sum())
    renorm = weights[idx] / captured
    out = kernels.gather_weighted_sum(renorm, cache.values[layer, kv_head], idx)
    return (
        AttentionOutput(
            output=out,
            normalizer=float(np.exp(lse)) * captured,
            exact_token_count=int(budget),
            approx_cluster_count=0,
        ),
        captured,
    )


def baseline_cluster_topk(q, cache, cc, budget, layer, kv_head):
    """Fixed cluster-budget baseline: exact attention over the tokens of
    the `budget` clusters with the largest estimated mass, centroid
    approximation for every remaining cluster, shared normalizer. Sink and
    window tokens stay exact."""
    est = estimate_cluster_distribution(q, cc, layer, kv_head)
    total = est.probs.size
    if not 1 <= budget <= total:
        raise ValueError(f"cluster budget must be in [1, {total}], got {budget}")
    chosen = est.order[:budget]
    rest = est.order[budget:]
    data = cc.estimation_data(layer, kv_head)
    exact_tokens = np.concatenate(
        [
            cc.sink_token_indices(),
            cc.window_token_indices(),
            *[data.clusters[int(i)].members for i in chosen],
        ]
    )
    exact_tokens.sort()
    return mixed_attention(q, cc, layer, kv_head, exact_tokens, rest, est)


def baseline_token_topp_fixed_budget(q, cache, est_budget, p, layer, kv_head):
    """Select-then-prune baseline with a fixed estimation budget.

    Candidates are the top `est_budget` tokens of the true distribution
    (standing in for an estimator's candidate set); the top-p cut then
    keeps the smallest candidate prefix whose true attention mass reaches
    p. Returns (output over the retained set, recovered true mass). When
    the candidate set's total mass is below p, everything in it is kept
    and the recovered mass falls short - the fixed-budget failure mode.
    """
    if not 1 <= est_budget <= cache.context_len:
        raise ValueError(
            f"est_budget must be in [1, {cache.context_len}], got {est_budget}"
        )
    weights, lse = full_attention_weights(q, cache, layer, kv_head)
    candidates = top_k_select(weights, est_budget)
    kept = top_p_select_sorted(weights[candidates], p)
    retained = candidates[:kept]
    recovered = float(weights[retained].sum())
    renorm = weights[retained] / recovered
    out = kernels.gather_weighted_sum(renorm, cache.values[layer, kv_head], retained)
    return (
        AttentionOutput(
            output=out,
            normalizer=float(np.exp(lse)) * recovered,
            exact_token_count=int(kept),
            approx_cluster_count=0,
        ),
        recovered,
    )
