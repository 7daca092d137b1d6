"""Backend parity: the compiled kernels and the NumPy fallback must be
interchangeable (same contract, same tie-breaks, near-identical numerics)."""

import os
import subprocess
import sys

import numpy as np
import pytest

from doublep import _kernels_py
from doublep import kernels

cy = pytest.importorskip("doublep._kernels_cy")


def _pair(seed, n=64, d=16, dtype=np.float32):
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n, d)).astype(dtype)
    q = rng.normal(size=d)
    return keys, q


def test_backend_is_reported():
    assert kernels.BACKEND in ("python", "cython")
    assert _kernels_py.BACKEND == "python"
    assert cy.BACKEND == "cython"


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_scaled_logits_parity(dtype):
    keys, q = _pair(0, dtype=dtype)
    a = _kernels_py.scaled_logits(keys, q, 0.25)
    b = cy.scaled_logits(keys, q, 0.25)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_gather_scaled_logits_parity():
    keys, q = _pair(1)
    idx = np.array([5, 0, 63, 5], dtype=np.intp)
    a = _kernels_py.gather_scaled_logits(keys, idx, q, 0.5)
    b = cy.gather_scaled_logits(keys, idx, q, 0.5)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_reduction_parity():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=30.0, size=257)
    assert _kernels_py.logsumexp(x) == pytest.approx(cy.logsumexp(x), abs=1e-12)
    np.testing.assert_allclose(
        _kernels_py.softmax(x), cy.softmax(x), rtol=1e-12, atol=1e-15
    )


def test_weighted_sum_parity():
    rng = np.random.default_rng(3)
    w = rng.random(128)
    mat = rng.normal(size=(128, 8)).astype(np.float32)
    np.testing.assert_allclose(
        _kernels_py.weighted_sum(w, mat), cy.weighted_sum(w, mat), rtol=1e-12
    )
    idx = np.array([0, 3, 127], dtype=np.intp)
    np.testing.assert_allclose(
        _kernels_py.gather_weighted_sum(w[:3], mat, idx),
        cy.gather_weighted_sum(w[:3], mat, idx),
        rtol=1e-12,
    )


def test_nearest_centroid_parity_and_ties():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(100, 5)).astype(np.float32)
    cents = rng.normal(size=(7, 5))
    a_assign, a_d = _kernels_py.nearest_centroid(pts, cents)
    b_assign, b_d = cy.nearest_centroid(pts, cents)
    np.testing.assert_array_equal(a_assign, b_assign)
    np.testing.assert_allclose(a_d, b_d, rtol=1e-9, atol=1e-9)

    # exact tie between two centroids: both backends pick the lower index
    pts = np.zeros((1, 2))
    cents = np.array([[1.0, 0.0], [-1.0, 0.0]])
    for impl in (_kernels_py, cy):
        assign, _ = impl.nearest_centroid(pts, cents)
        assert assign[0] == 0


def test_sorted_prefix_count_parity():
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = np.sort(rng.random(int(rng.integers(1, 40))))[::-1].copy()
        v /= v.sum()
        p = float(rng.uniform(0.05, 1.0))
        assert _kernels_py.sorted_prefix_count(v, p) == cy.sorted_prefix_count(v, p)
    for impl in (_kernels_py, cy):
        with pytest.raises(ValueError):
            impl.sorted_prefix_count(np.array([0.1, 0.6, 0.3]), 0.5)


@pytest.mark.parametrize("choice,expected", [("python", "python"), ("cython", "cython")])
def test_env_override_selects_backend(choice, expected):
    env = dict(os.environ, DOUBLEP_KERNELS=choice)
    out = subprocess.run(
        [sys.executable, "-c", "import doublep; print(doublep.BACKEND)"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == expected


def test_dispatcher_accepts_lists():
    # the wrappers coerce plain sequences; ensures the contract is ndarray-free
    assert kernels.logsumexp([0.0, 0.0]) == pytest.approx(np.log(2.0))
    np.testing.assert_allclose(kernels.softmax([1.0, 1.0]), [0.5, 0.5])
