import numpy as np
import pytest

from doublep import KvCache, QueryTrace, build_clustered_cache


def make_cache(n=64, d=8, layers=1, kv_heads=1, seed=0, values=None):
    """Random dense cache for unit tests."""
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(layers, kv_heads, n, d))
    if values is None:
        values = rng.normal(size=(layers, kv_heads, n, d))
    else:
        values = np.broadcast_to(values, (layers, kv_heads, n, d))
    return KvCache(keys=keys, values=values)


def make_trace(cache, steps=1, gqa_group=1, seed=1):
    rng = np.random.default_rng(seed)
    q = rng.normal(
        size=(steps, cache.num_layers, cache.num_kv_heads * gqa_group, cache.head_dim)
    )
    return QueryTrace(queries=q, gqa_group=gqa_group)


def singleton_cc(cache, sink=0, window=0):
    """Clustered cache where every middle token is its own cluster."""
    middle = cache.context_len - sink - window
    return build_clustered_cache(cache, k=middle, sink=sink, window=window, seed=0)


@pytest.fixture
def small_cache():
    return make_cache(n=64, d=8, seed=3)
