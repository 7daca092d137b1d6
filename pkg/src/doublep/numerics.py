"""Numerically stable scalar/vector primitives.

Score vectors are plain 1-D NumPy arrays (float32 or float64). Storage may
be 32-bit, but every accumulation here runs in 64-bit: attention
normalizers sum thousands of exponentials and 32-bit accumulation drifts.
Outputs are float64.

All functions are pure; non-finite inputs (NaN or +/-Inf) are rejected
rather than silently absorbed.
"""

import numpy as np

from . import kernels


def _check_scores(x, name="logits"):
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if x.size == 0:
        raise ValueError(f"empty {name}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite logit in {name}")
    return x


def stable_softmax(logits):
    """Softmax with max-subtraction.

    Safe for logits up to +/-1e4: the largest shifted exponent is 0, so no
    intermediate overflows. Returns float64 probabilities summing to 1.
    """
    logits = _check_scores(logits)
    return kernels.softmax(logits)


def log_sum_exp(logits):
    """log(sum(exp(logits))) via max-subtraction.

    Exact for a single element (returns that element unchanged).
    """
    logits = _check_scores(logits)
    return kernels.logsumexp(logits)


def dot_scaled(q, k, d):
    """Scaled dot product (q . k) / sqrt(d), accumulated in float64."""
    q = np.asarray(q)
    k = np.asarray(k)
    if q.shape != (d,) or k.shape != (d,):
        raise ValueError(
            f"dimension mismatch: expected length {d}, got {q.shape} and {k.shape}"
        )
    return float(q.astype(np.float64, copy=False) @ k.astype(np.float64, copy=False)) / np.sqrt(d)
