import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doublep.numerics import dot_scaled, log_sum_exp, stable_softmax

finite_vectors = st.lists(
    st.floats(min_value=-1e4, max_value=1e4, allow_nan=False),
    min_size=1,
    max_size=40,
)


def test_logsumexp_two_zeros():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_zero_two():
    # independent 64-bit summation oracle
    oracle = math.log(math.exp(0.0) + math.exp(2.0))
    got = log_sum_exp([0.0, 2.0])
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(2.1269, abs=1e-4)


def test_logsumexp_single_element_exact():
    assert log_sum_exp([123.456]) == 123.456


def test_softmax_huge_logits_match_shifted_reference():
    x = np.array([1000.0, 1000.5, 999.0])
    shifted = np.exp(x - x.max())
    ref = shifted / shifted.sum()
    got = stable_softmax(x)
    assert np.all(np.isfinite(got))
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_softmax_sums_to_one(small_cache):
    logits = small_cache.keys[0, 0] @ np.ones(small_cache.head_dim)
    probs = stable_softmax(logits)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(probs >= 0.0)


@given(finite_vectors, st.floats(min_value=-500, max_value=500))
@settings(max_examples=100, deadline=None)
def test_logsumexp_shift_invariance(xs, c):
    x = np.array(xs)
    assert log_sum_exp(x + c) == pytest.approx(log_sum_exp(x) + c, abs=1e-9)


@given(finite_vectors, st.floats(min_value=-500, max_value=500))
@settings(max_examples=100, deadline=None)
def test_softmax_shift_invariance(xs, c):
    x = np.array(xs)
    np.testing.assert_allclose(stable_softmax(x + c), stable_softmax(x), atol=1e-12)


@given(finite_vectors)
@settings(max_examples=100, deadline=None)
def test_logsumexp_bounds(xs):
    # max(x) <= lse(x) <= max(x) + log(n)
    x = np.array(xs)
    lse = log_sum_exp(x)
    assert x.max() - 1e-12 <= lse <= x.max() + math.log(x.size) + 1e-12


def test_dot_scaled_matches_float64_oracle():
    rng = np.random.default_rng(0)
    q = rng.normal(size=64).astype(np.float32)
    k = rng.normal(size=64).astype(np.float32)
    oracle = float(q.astype(np.float64) @ k.astype(np.float64)) / math.sqrt(64)
    got = dot_scaled(q, k, 64)
    assert abs(got - oracle) <= 1e-5 * max(abs(oracle), 1.0)


@pytest.mark.parametrize("bad", [[], [[1.0, 2.0]], [np.nan], [np.inf]])
def test_rejects_bad_inputs(bad):
    with pytest.raises(ValueError):
        log_sum_exp(bad)
    with pytest.raises(ValueError):
        stable_softmax(bad)


def test_dot_scaled_rejects_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        dot_scaled(np.ones(3), np.ones(4), 4)
