import numpy as np
import pytest

from doublep.clustering import (
    build_clustered_cache,
    default_cluster_count,
    kmeans_fit,
)

from conftest import make_cache


def test_two_separated_blobs_recovered():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 1.0, size=(20, 4))
    b = rng.normal(0.0, 1.0, size=(20, 4)) + 10.0
    pts = np.vstack([a, b])
    labels = np.array([0] * 20 + [1] * 20)
    fit = kmeans_fit(pts, 2, seed=0)
    # identical up to relabeling: each fitted cluster must be pure
    for c in (0, 1):
        got = labels[fit.assignments == c]
        assert got.size == 20
        assert np.all(got == got[0])


def test_objective_non_increasing():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(200, 6))
    fit = kmeans_fit(pts, 8, seed=2)
    obj = np.array(fit.objective)
    assert np.all(np.diff(obj) <= 1e-9)


def test_fit_is_deterministic():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(100, 5))
    f1 = kmeans_fit(pts, 6, seed=7)
    f2 = kmeans_fit(pts, 6, seed=7)
    np.testing.assert_array_equal(f1.assignments, f2.assignments)
    np.testing.assert_array_equal(f1.centroids, f2.centroids)


def test_centroids_are_exact_means():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(80, 3))
    fit = kmeans_fit(pts, 5, seed=1)
    for c in range(fit.centroids.shape[0]):
        members = pts[fit.assignments == c].astype(np.float64)
        np.testing.assert_allclose(fit.centroids[c], members.mean(axis=0), atol=1e-12)


def test_identical_points_collapse_to_one_cluster():
    fit = kmeans_fit(np.ones((5, 3)), 3, seed=0)
    assert fit.centroids.shape[0] == 1
    assert np.all(fit.assignments == 0)


def test_more_clusters_than_points_rejected():
    with pytest.raises(ValueError, match="more clusters than points"):
        kmeans_fit(np.ones((2, 2)), 3)


def test_single_middle_token():
    # context exactly sink + window + 1: the lone middle token is its own cluster
    cache = make_cache(n=7, d=3, seed=4)
    cc = build_clustered_cache(cache, k=1, sink=2, window=4, seed=0)
    clusters = cc.clusters[0][0]
    assert len(clusters) == 1
    c = clusters[0]
    assert list(c.members) == [2]
    np.testing.assert_allclose(c.centroid, cache.keys[0, 0, 2], atol=1e-7)
    np.testing.assert_allclose(c.value_mean, cache.values[0, 0, 2], atol=1e-7)


def test_value_sums_match_brute_force():
    cache = make_cache(n=96, d=6, layers=2, kv_heads=2, seed=6)
    cc = build_clustered_cache(cache, k=7, sink=4, window=16, seed=3)
    for layer in range(2):
        for head in range(2):
            values = cache.values[layer, head].astype(np.float64)
            for c in cc.clusters[layer][head]:
                brute = values[c.members].sum(axis=0)
                np.testing.assert_allclose(c.value_sum, brute, atol=1e-5)
                np.testing.assert_allclose(c.value_mean * c.size, brute, atol=1e-5)


def test_members_partition_middle_range():
    cache = make_cache(n=128, d=4, seed=7)
    cc = build_clustered_cache(cache, k=9, sink=4, window=32, seed=0)
    all_members = np.concatenate([c.members for c in cc.clusters[0][0]])
    assert len(all_members) == len(set(all_members.tolist()))
    assert sorted(all_members.tolist()) == list(range(4, 128 - 32))


def test_requested_k_clamped_to_middle():
    cache = make_cache(n=12, d=3)
    cc = build_clustered_cache(cache, k=50, sink=4, window=4, seed=0)
    assert len(cc.clusters[0][0]) <= 4


def test_no_middle_tokens_rejected():
    cache = make_cache(n=8, d=3)
    with pytest.raises(ValueError, match="middle"):
        build_clustered_cache(cache, k=1, sink=4, window=4)


def test_default_cluster_count():
    assert default_cluster_count(64, 32) == 2
    assert default_cluster_count(65, 32) == 3
    assert default_cluster_count(1, 32) == 1


def test_heads_are_independent():
    cache = make_cache(n=64, d=4, kv_heads=2, seed=8)
    cc = build_clustered_cache(cache, k=4, sink=0, window=0, seed=5)
    sizes0 = [c.size for c in cc.clusters[0][0]]
    sizes1 = [c.size for c in cc.clusters[0][1]]
    assert sum(sizes0) == sum(sizes1) == 64
    # different key sets should not produce identical centroids
    assert not np.allclose(cc.clusters[0][0][0].centroid, cc.clusters[0][1][0].centroid)


def test_append_tokens_slide_window():
    cache = make_cache(n=32, d=4, seed=9)
    cc = build_clustered_cache(cache, k=3, sink=2, window=8, seed=0)
    base_clusters = len(cc.head_clusters(0, 0))
    rng = np.random.default_rng(10)
    for i in range(3):
        cc.append_tokens(
            rng.normal(size=(1, 1, 4)).astype(np.float32),
            rng.normal(size=(1, 1, 4)).astype(np.float32),
        )
        assert cc.total_tokens == 32 + i + 1
        # window holds the newest 8 positions
        assert cc.window_token_indices()[-1] == 32 + i
    # three aged-out tokens became residual singletons
    assert len(cc.head_clusters(0, 0)) == base_clusters + 3
    appended = cc.gather_keys(0, 0, np.array([32, 33, 34]))
    assert appended.shape == (3, 4)


def test_append_shape_validated():
    cache = make_cache(n=32, d=4)
    cc = build_clustered_cache(cache, k=3, sink=2, window=8, seed=0)
    with pytest.raises(ValueError, match="shape"):
        cc.append_tokens(np.zeros((1, 1, 5)), np.zeros((1, 1, 5)))
