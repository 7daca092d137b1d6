"""Measurement utilities: recovered mass, violation rates, per-cluster
approximation error, minimal exact-cluster counts, and the per-step
experiment record shared by the CLI and the test suite.

All metrics compare against the dense softmax oracle computed in float64.
"""

from dataclasses import dataclass

import numpy as np

from . import engine


def output_error(candidate, reference):
    """Relative L2 error between two attention outputs (raw vectors or
    AttentionOutput instances)."""
    a = candidate.output if isinstance(candidate, engine.AttentionOutput) else np.asarray(candidate)
    b = reference.output if isinstance(reference, engine.AttentionOutput) else np.asarray(reference)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def recovered_mass(plan, q, cache):
    """True attention mass carried by a plan's exact tokens.

    Measured under the full-context distribution (including appended decode
    tokens, if any), in [0, 1].
    """
    cc = plan.estimate.cc
    if cc.source is not cache:
        raise ValueError("plan/cc mismatch: plan was derived from a different cache")
    weights, _ = engine.true_token_weights(
        q, cc, plan.estimate.layer, plan.estimate.kv_head
    )
    return float(weights[plan.exact_tokens].sum())


def adaptive_token_budget(q, cache, p, layer, kv_head):
    """Minimal number of tokens whose true attention mass reaches p.

    This is the per-step budget an oracle with exact scores would need; its
    spread across steps is what any fixed budget has to straddle.
    """
    weights, _ = engine.full_attention_weights(q, cache, layer, kv_head)
    order = np.argsort(-weights, kind="stable")
    cum = np.cumsum(weights[order])
    return int(np.searchsorted(cum, p, side="left") + 1)


def violation_rate(recovered, p):
    """Fraction of steps whose recovered mass falls below the target p."""
    arr = np.asarray(recovered, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no recovered masses given")
    return float(np.mean(arr < p))


def cluster_approx_error(q, cache, cc, layer, kv_head):
    """Per-cluster |true mass - estimated mass| as a fraction of the total
    exponential mass, ordered by estimated mass descending.

    Returns (errors, order): errors[r] is the error of the rank-r cluster.
    """
    est = engine.estimate_cluster_distribution(q, cc, layer, kv_head)
    weights, lse = engine.true_token_weights(q, cc, layer, kv_head)
    data = cc.estimation_data(layer, kv_head)
    true_mass = np.array(
        [weights[c.members].sum() for c in data.clusters], dtype=np.float64
    )
    # Estimated mass as a fraction of the true total: exp(log_mass - log Z).
    est_frac = np.exp(est.log_masses - lse)
    errors = np.abs(true_mass - est_frac)
    return errors[est.order], est.order


def min_clusters_for_error(q, cache, cc, eps, layer, kv_head):
    """Smallest exact-cluster count (taken in estimated-mass order, the
    rest centroid-approximated, sink and window exact) whose output is
    within relative error eps of dense attention.

    Returns (count, attained). attained is False when even computing every
    cluster exactly misses eps; count is then the total cluster count.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    reference = engine.full_attention(q, cache, layer, kv_head)
    est = engine.estimate_cluster_distribution(q, cc, layer, kv_head)
    data = cc.estimation_data(layer, kv_head)
    total = len(data.clusters)
    sink = cc.sink_token_indices()
    window = cc.window_token_indices()
    for count in range(total + 1):
        chosen = est.order[:count]
        rest = est.order[count:]
        exact_tokens = np.concatenate(
            [sink, window, *[data.clusters[int(i)].members for i in chosen]]
        )
        exact_tokens.sort()
        out = engine.mixed_attention(
            q, cc, est.layer, est.kv_head, exact_tokens, rest, est
        )
        if output_error(out, reference) <= eps:
            return count, True
    return total, False


@dataclass(frozen=True)
class ExperimentRecord:
    """One (layer, head, step, method) measurement row.

    Budget fields not applicable to a method are None (blank in CSV).
    est_mass is the estimated mass retained by stage-1 selection;
    recovered_mass is the true mass of the exactly-computed tokens;
    rel_err compares the method's output against dense attention.
    """

    layer: int
    head: int
    step: int
    method: str
    p1: float | None
    p2: float | None
    k: int | None
    m: int | None
    B: int | None
    clusters_total: int | None
    clusters_selected: int | None
    clusters_exact: int | None
    exact_tokens: int
    est_mass: float | None
    recovered_mass: float
    violation: bool
    rel_err: float

    def __post_init__(self):
        if not -1e-6 <= self.recovered_mass <= 1.0 + 1e-6:
            raise ValueError(
                f"recovered_mass out of range: {self.recovered_mass}"
            )
        if self.rel_err < 0:
            raise ValueError(f"rel_err must be >= 0, got {self.rel_err}")

    @property
    def clusters_approx(self):
        if self.clusters_selected is None or self.clusters_exact is None:
            return None
        return self.clusters_selected - self.clusters_exact
