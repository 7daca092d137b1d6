"""Prefill-stage clustering of key vectors and per-cluster metadata.

Each (layer, kv-head) gets its own k-means fit over the "middle" tokens,
the range left after reserving sink tokens at the front and a sliding
window at the back; sink and window tokens are always attended exactly and
never clustered. A cluster stores its member token indices, the exact
float64 mean of member keys (centroid), its size, and the float64 sum and
mean of member values. Centroids being exact means is what keeps every
centroid-based mass estimate a lower bound on the true cluster mass.

Tokens appended after prefill (decode-time growth) join the sliding
window; once they age out of the window they are folded into a residual
pool of singleton clusters, which keeps every estimate well-defined
without re-clustering.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .kvcache import KvCache

DEFAULT_TOKENS_PER_CLUSTER = 32
DEFAULT_MAX_ITERS = 25


class KMeansResult(NamedTuple):
    assignments: np.ndarray  # int64[n], labels in [0, len(centroids))
    centroids: np.ndarray    # float64[k', d]; k' <= requested k
    objective: list          # per-iteration sum of squared distances


def _plusplus_init(x64, k, rng):
    """k-means++ seeding: first center uniform, rest by squared-distance
    weighted sampling."""
    n = x64.shape[0]
    centers = np.empty((k, x64.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x64[first]
    if k == 1:
        return centers
    dsq = np.sum((x64 - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(dsq.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=dsq / total))
        else:
            # all points coincide with an existing center; any pick works
            idx = int(rng.integers(n))
        centers[i] = x64[idx]
        np.minimum(dsq, np.sum((x64 - centers[i]) ** 2, axis=1), out=dsq)
    return centers


def kmeans_fit(keys, k, max_iters=DEFAULT_MAX_ITERS, seed=0):
    """Lloyd's k-means over key vectors with k-means++ seeding.

    Deterministic given (keys, k, seed). Empty clusters are dropped and the
    fit continues, so the returned centroid count may be below k. Stops
    when no assignment changes or after max_iters. The recorded objective
    sequence is non-increasing.
    """
    keys = np.asarray(keys)
    if keys.ndim != 2 or keys.shape[0] < 1:
        raise ValueError("keys must be a nonempty (n, d) matrix")
    n = keys.shape[0]
    if k < 1:
        raise ValueError("cluster count must be >= 1")
    if k > n:
        raise ValueError(f"more clusters than points: k={k}, n={n}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    x64 = keys.astype(np.float64, copy=False)
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(x64, k, rng)

    objective = []
    prev_assign = None
    assign = None
    for _ in range(max_iters):
        assign, sqdist = kernels.nearest_centroid(keys, centroids)
        objective.append(float(sqdist.sum()))

        used = np.unique(assign)
        dropped = used.size < centroids.shape[0]
        if dropped:
            remap = np.full(centroids.shape[0], -1, dtype=np.int64)
            remap[used] = np.arange(used.size)
            assign = remap[assign]
            centroids = centroids[used]

        if not dropped and prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign

        for c in range(centroids.shape[0]):
            centroids[c] = x64[assign == c].mean(axis=0)

    # Returned centroids are exact float64 means of the final assignment.
    final = np.empty_like(centroids)
    for c in range(centroids.shape[0]):
        final[c] = x64[assign == c].mean(axis=0)
    return KMeansResult(assignments=assign, centroids=final, objective=objective)


@dataclass(frozen=True)
class Cluster:
    """Metadata for one cluster of cached tokens."""

    members: np.ndarray    # int64 token indices into the cache, ascending
    centroid: np.ndarray   # float64[d], exact mean of member keys
    size: int              # == len(members), >= 1
    value_sum: np.ndarray  # float64[d], sum of member values
    value_mean: np.ndarray # float64[d], value_sum / size


class EstimationData(NamedTuple):
    """Per-head dense views used by the cluster-mass estimator."""

    centroids: np.ndarray    # float64[K, d]
    log_sizes: np.ndarray    # float64[K]
    value_means: np.ndarray  # float64[K, d]
    clusters: list           # list[Cluster], same order


def _singleton(pos, key, value):
    return Cluster(
        members=np.array([pos], dtype=np.int64),
        centroid=key.astype(np.float64),
        size=1,
        value_sum=value.astype(np.float64),
        value_mean=value.astype(np.float64),
    )


@dataclass
class ClusteredCache:
    """Per-(layer, kv-head) cluster lists over a KvCache.

    Immutable except for decode-time growth through append_tokens, which is
    single-writer. Cluster member sets per head exactly partition the
    middle token range plus any residual (aged-out) appended tokens.
    """

    source: KvCache
    sink: int
    window: int
    clusters: list                     # clusters[layer][kv_head] -> list[Cluster]
    _extra_keys: list = field(default_factory=list)    # per appended token: (L, H, d) f32
    _extra_values: list = field(default_factory=list)
    _est_cache: dict = field(default_factory=dict, repr=False)

    @property
    def middle_range(self):
        """Token interval [start, stop) covered by prefill clustering."""
        return (self.sink, self.source.context_len - self.window)

    @property
    def num_appended(self):
        return len(self._extra_keys)

    @property
    def total_tokens(self):
        return self.source.context_len + self.num_appended

    def sink_token_indices(self):
        return np.arange(self.sink, dtype=np.int64)

    def window_token_indices(self):
        """The most recent `window` token positions (slides under growth)."""
        total = self.total_tokens
        return np.arange(total - self.window, total, dtype=np.int64)

    def _residual_positions(self):
        base_window_start = self.source.context_len - self.window
        return range(base_window_start, self.total_tokens - self.window)

    def append_tokens(self, new_keys, new_values):
        """Append one decoded token's K/V for every (layer, kv head).

        new_keys/new_values: shape (num_layers, num_kv_heads, head_dim).
        The token lands in the sliding window; older tokens that fall out
        of the window become residual singleton clusters.
        """
        nk = np.ascontiguousarray(new_keys, dtype=np.float32)
        nv = np.ascontiguousarray(new_values, dtype=np.float32)
        want = (self.source.num_layers, self.source.num_kv_heads, self.source.head_dim)
        if nk.shape != want or nv.shape != want:
            raise ValueError(f"appended token must have shape {want}")
        self._extra_keys.append(nk)
        self._extra_values.append(nv)
        self._est_cache.clear()

    def gather_keys(self, layer, kv_head, positions):
        """Key rows for arbitrary positions, including appended ones."""
        return self._gather(self.source.keys, self._extra_keys, layer, kv_head, positions)

    def gather_values(self, layer, kv_head, positions):
        return self._gather(self.source.values, self._extra_values, layer, kv_head, positions)

    def _gather(self, base, extra, layer, kv_head, positions):
        positions = np.asarray(positions, dtype=np.int64)
        n = self.source.context_len
        if positions.size == 0:
            return np.empty((0, self.source.head_dim), dtype=np.float32)
        if self.num_appended == 0 or positions.max() < n:
            return base[layer, kv_head][positions]
        out = np.empty((positions.size, self.source.head_dim), dtype=np.float32)
        in_base = positions < n
        out[in_base] = base[layer, kv_head][positions[in_base]]
        for i in np.flatnonzero(~in_base):
            out[i] = extra[positions[i] - n][layer, kv_head]
        return out

    def head_clusters(self, layer, kv_head):
        """Middle clusters plus residual singletons for one head."""
        residual = [
            _singleton(
                pos,
                self._key_at(layer, kv_head, pos),
                self._value_at(layer, kv_head, pos),
            )
            for pos in self._residual_positions()
        ]
        return self.clusters[layer][kv_head] + residual

    def _key_at(self, layer, kv_head, pos):
        n = self.source.context_len
        if pos < n:
            return self.source.keys[layer, kv_head, pos]
        return self._extra_keys[pos - n][layer, kv_head]

    def _value_at(self, layer, kv_head, pos):
        n = self.source.context_len
        if pos < n:
            return self.source.values[layer, kv_head, pos]
        return self._extra_values[pos - n][layer, kv_head]

    def estimation_data(self, layer, kv_head):
        """Dense centroid/size/value-mean arrays for the estimator, cached
        until the next append."""
        key = (layer, kv_head)
        cached = self._est_cache.get(key)
        if cached is not None:
            return cached
        cs = self.head_clusters(layer, kv_head)
        data = EstimationData(
            centroids=np.ascontiguousarray([c.centroid for c in cs]),
            log_sizes=np.log(np.array([c.size for c in cs], dtype=np.float64)),
            value_means=np.ascontiguousarray([c.value_mean for c in cs]),
            clusters=cs,
        )
        self._est_cache[key] = data
        return data


def default_cluster_count(middle_len, tokens_per_cluster=DEFAULT_TOKENS_PER_CLUSTER):
    """Cluster count giving an average cluster size near tokens_per_cluster."""
    return max(1, math.ceil(middle_len / tokens_per_cluster))


def build_clustered_cache(cache, k=None, sink=4, window=64, seed=0,
                          max_iters=DEFAULT_MAX_ITERS,
                          tokens_per_cluster=DEFAULT_TOKENS_PER_CLUSTER):
    """Cluster every (layer, kv-head) of a cache and compute metadata.

    k=None picks ceil(middle_len / tokens_per_cluster) clusters; an
    explicit k is clamped to the middle-token count so tiny heads stay
    valid. Each head's fit is seeded from (seed, layer, head), so builds
    are deterministic and heads are independent.
    """
    if sink < 0 or window < 0:
        raise ValueError("sink and window must be >= 0")
    n = cache.context_len
    middle_len = n - window - sink
    if middle_len < 1:
        raise ValueError(
            f"no middle tokens to cluster: sink {sink} + window {window} >= context {n}"
        )
    if k is None:
        k = default_cluster_count(middle_len, tokens_per_cluster)
    if k < 1:
        raise ValueError("cluster count must be >= 1")
    k = min(k, middle_len)

    start, stop = sink, n - window
    per_layer = []
    for layer in range(cache.num_layers):
        per_head = []
        for head in range(cache.num_kv_heads):
            head_seed = int(np.random.SeedSequence([seed, layer, head]).generate_state(1)[0])
            middle_keys = cache.keys[layer, head, start:stop]
            fit = kmeans_fit(middle_keys, k, max_iters=max_iters, seed=head_seed)
            values64 = cache.values[layer, head, start:stop].astype(np.float64)
            head_clusters = []
            for c in range(fit.centroids.shape[0]):
                local = np.flatnonzero(fit.assignments == c)
                vsum = values64[local].sum(axis=0)
                head_clusters.append(
                    Cluster(
                        members=(local + start).astype(np.int64),
                        centroid=fit.centroids[c],
                        size=int(local.size),
                        value_sum=vsum,
                        value_mean=vsum / local.size,
                    )
                )
            per_head.append(head_clusters)
        per_layer.append(per_head)
    return ClusteredCache(source=cache, sink=sink, window=window, clusters=per_layer)
