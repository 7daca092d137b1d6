"""Pure-NumPy kernel backend.

Same contract as the compiled backend in ``_kernels_cy``: float32 or
float64 inputs, all accumulation in float64. Selected automatically by
:mod:`doublep.kernels` when the extension is unavailable or when
``DOUBLEP_KERNELS=python`` is set.
"""

import numpy as np

BACKEND = "python"


def scaled_logits(keys, q, scale):
    """Return ``(keys @ q) * scale`` as a float64 vector."""
    keys = np.asarray(keys)
    q = np.asarray(q, dtype=np.float64)
    return (keys.astype(np.float64, copy=False) @ q) * scale


def gather_scaled_logits(keys, idx, q, scale):
    """scaled_logits restricted to the rows listed in ``idx``."""
    keys = np.asarray(keys)
    q = np.asarray(q, dtype=np.float64)
    rows = keys[np.asarray(idx, dtype=np.intp)]
    return (rows.astype(np.float64, copy=False) @ q) * scale


def logsumexp(x):
    """Max-subtracted log(sum(exp(x))). Exact for a single element."""
    x = np.asarray(x, dtype=np.float64)
    m = float(np.max(x))
    if x.size == 1:
        return m
    return m + float(np.log(np.sum(np.exp(x - m))))


def softmax(x):
    """Max-subtracted softmax as float64 probabilities."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def weighted_sum(weights, mat):
    """Return ``weights @ mat`` in float64 (one output per column)."""
    w = np.asarray(weights, dtype=np.float64)
    return w @ np.asarray(mat).astype(np.float64, copy=False)


def gather_weighted_sum(weights, mat, idx):
    """weighted_sum over the rows of ``mat`` listed in ``idx``."""
    w = np.asarray(weights, dtype=np.float64)
    rows = np.asarray(mat)[np.asarray(idx, dtype=np.intp)]
    return w @ rows.astype(np.float64, copy=False)


def nearest_centroid(points, centroids):
    """Assign each point to its closest centroid (squared Euclidean).

    Ties go to the lowest centroid index. Returns ``(assignments, sqdist)``
    with int64 assignments and the float64 squared distance to the chosen
    centroid.
    """
    x = np.asarray(points).astype(np.float64, copy=False)
    c = np.asarray(centroids).astype(np.float64, copy=False)
    # |x - c|^2 expanded; cheaper than materializing the difference tensor.
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ c.T)
        + np.sum(c * c, axis=1)[None, :]
    )
    assign = np.argmin(d2, axis=1)
    best = d2[np.arange(x.shape[0]), assign]
    # The expansion can go slightly negative for exact matches.
    np.maximum(best, 0.0, out=best)
    return assign.astype(np.int64), best


def sorted_prefix_count(sorted_probs, p):
    """Length of the smallest prefix of a non-increasing probability vector
    whose cumulative sum reaches ``p``.

    Scans at most (count + 1) entries and raises ValueError on any ascent
    among the scanned entries. Returns the full length when the total mass
    never reaches ``p``.
    """
    sp = np.asarray(sorted_probs, dtype=np.float64)
    total = 0.0
    prev = np.inf
    for i in range(sp.shape[0]):
        v = sp[i]
        if v > prev:
            raise ValueError("input not sorted")
        prev = v
        total += v
        if total >= p:
            return i + 1
    return sp.shape[0]
