"""Top-p and top-k selection primitives.

Module-wide boundary contract: selection stops at the first prefix whose
cumulative mass is >= p (not > p). Ties between equal scores always go to
the lower original index, which makes every downstream experiment
reproducible. Cumulative sums run in float64.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class TopPResult:
    """Outcome of a top-p cut.

    selected: original indices in descending-probability order.
    cumulative_mass: mass of the selected set under the (normalized) input;
    >= p unless the whole input was selected because its total never
    reached p.
    """

    selected: np.ndarray
    cumulative_mass: float
    p: float


def _desc_order(scores):
    # stable sort on negated scores keeps the lower index first on ties
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def top_p_select(probs, p):
    """Smallest descending-probability prefix with cumulative mass >= p.

    Accepts unnormalized nonnegative inputs; they are normalized by their
    total first, so the stage-2 renormalized-subset use reduces to the
    same primitive.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a nonempty 1-D vector")
    if not np.all(np.isfinite(probs)):
        raise ValueError("non-finite probability")
    if np.any(probs < 0.0):
        raise ValueError("negative probability")
    total = float(probs.sum())
    if total <= 0.0:
        raise ValueError("zero total mass")

    order = _desc_order(probs)
    cumulative = np.cumsum(probs[order]) / total
    count = int(np.searchsorted(cumulative, p, side="left")) + 1
    if count > order.size:  # total mass never reached p: select everything
        count = order.size
    return TopPResult(
        selected=order[:count],
        cumulative_mass=float(cumulative[count - 1]),
        p=p,
    )


def top_p_select_sorted(sorted_probs, p):
    """Prefix length for an already-sorted (non-increasing) probability
    vector, by prefix-sum accumulation with early stopping.

    The input is taken as already normalized: the threshold is applied to
    the absolute cumulative sum, and at most (returned count + 1) entries
    are scanned. An ascent among the scanned entries raises ValueError.
    Returns the full length when the total never reaches p.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    sorted_probs = np.asarray(sorted_probs, dtype=np.float64)
    if sorted_probs.ndim != 1 or sorted_probs.size == 0:
        raise ValueError("sorted_probs must be a nonempty 1-D vector")
    return kernels.sorted_prefix_count(sorted_probs, p)


def top_k_select(scores, k):
    """Indices of the k largest scores, descending, lower index on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a nonempty 1-D vector")
    if not 1 <= k <= scores.size:
        raise ValueError(f"k must be in [1, {scores.size}], got {k}")
    return _desc_order(scores)[:k]
