"""Kernel backend selection.

Imports the compiled Cython kernels when available and falls back to the
NumPy implementations otherwise. ``DOUBLEP_KERNELS=python`` forces the
fallback; ``DOUBLEP_KERNELS=cython`` requires the extension and raises if
it is missing. Both backends share one contract (float64 accumulation,
lowest-index tie-breaks), so everything above this module is
backend-agnostic.
"""

import os

import numpy as np

from . import _kernels_py

_choice = os.environ.get("DOUBLEP_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _kernels_py
elif _choice == "cython":
    from . import _kernels_cy as _impl
else:
    try:
        from . import _kernels_cy as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def _as_f64_vec(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _as_mat(x):
    a = np.ascontiguousarray(x)
    if a.dtype != np.float32 and a.dtype != np.float64:
        a = a.astype(np.float64)
    return a


def _as_idx(idx):
    return np.ascontiguousarray(idx, dtype=np.intp)


def scaled_logits(keys, q, scale):
    """(keys @ q) * scale with float64 accumulation; returns float64[n]."""
    return _impl.scaled_logits(_as_mat(keys), _as_f64_vec(q), float(scale))


def gather_scaled_logits(keys, idx, q, scale):
    """scaled_logits over the rows of ``keys`` listed in ``idx``."""
    return _impl.gather_scaled_logits(
        _as_mat(keys), _as_idx(idx), _as_f64_vec(q), float(scale)
    )


def logsumexp(x):
    """Max-subtracted log(sum(exp(x))) of a nonempty vector."""
    return float(_impl.logsumexp(_as_f64_vec(x)))


def softmax(x):
    """Max-subtracted softmax of a nonempty vector; float64 output."""
    return _impl.softmax(_as_f64_vec(x))


def weighted_sum(weights, mat):
    """weights @ mat with float64 accumulation; returns float64[d]."""
    return _impl.weighted_sum(_as_f64_vec(weights), _as_mat(mat))


def gather_weighted_sum(weights, mat, idx):
    """weights @ mat[idx] with float64 accumulation."""
    return _impl.gather_weighted_sum(_as_f64_vec(weights), _as_mat(mat), _as_idx(idx))


def nearest_centroid(points, centroids):
    """Per-point closest centroid under squared Euclidean distance.

    Returns (assignments int64[n], squared distance float64[n]); ties go to
    the lowest centroid index.
    """
    return _impl.nearest_centroid(
        _as_mat(points), np.ascontiguousarray(centroids, dtype=np.float64)
    )


def sorted_prefix_count(sorted_probs, p):
    """Smallest prefix of a non-increasing vector with cumulative sum >= p.

    Early-stops after the returned count; raises ValueError on an ascent
    among the scanned entries.
    """
    return int(_impl.sorted_prefix_count(_as_f64_vec(sorted_probs), float(p)))
