"""Synthetic clusterable attention workloads.

Keys are drawn from Gaussian blobs (per layer and KV head), values share
the blob structure (a per-blob mean plus noise, so tokens with similar
keys carry similar values), and queries aim at the blob structure
according to a tail profile:

- "peaked": each step aligns with one random blob at high gain, so a small
  fraction of the context carries nearly all attention mass;
- "heavy": each step blends several blobs at moderate gain, spreading mass
  over a sizeable minority of the context;
- "uniform": zero-gain queries, the attention distribution is exactly flat;
- "mixed": per-head round-robin over the three above.

Generation is a pure function of the spec: every random stream is derived
from (seed, purpose tag, layer, head), so regenerating with the same spec
is bit-identical regardless of call order.
"""

from dataclasses import dataclass

import numpy as np

from .kvcache import KvCache, QueryTrace

PROFILES = ("peaked", "heavy", "uniform", "mixed")

# Stream tags keeping key/value/query draws independent per (layer, head).
_TAG_KEYS = 0
_TAG_VALUES = 1
_TAG_QUERIES = 2


@dataclass(frozen=True)
class WorkloadSpec:
    """Parameters of one synthetic workload."""

    context_len: int
    head_dim: int
    num_layers: int = 1
    num_kv_heads: int = 1
    gqa_group: int = 1
    num_steps: int = 1
    num_blobs: int = 8
    blob_spread: float = 0.3
    blob_separation: float = 1.0
    tail_profile: str = "mixed"
    seed: int = 0
    sink: int = 4
    window: int = 64

    def __post_init__(self):
        if self.tail_profile not in PROFILES:
            raise ValueError(
                f"unknown tail profile {self.tail_profile!r}, expected one of {PROFILES}"
            )
        for name in (
            "context_len",
            "head_dim",
            "num_layers",
            "num_kv_heads",
            "gqa_group",
            "num_steps",
            "num_blobs",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.blob_spread < 0 or self.blob_separation <= 0:
            raise ValueError("blob_spread must be >= 0 and blob_separation > 0")
        if self.sink < 0 or self.window < 0:
            raise ValueError("sink and window must be >= 0")
        if self.context_len <= self.sink + self.window:
            raise ValueError(
                "context_len must exceed sink + window "
                f"({self.context_len} <= {self.sink} + {self.window})"
            )

    @property
    def num_query_heads(self):
        return self.num_kv_heads * self.gqa_group


def profile_for_head(spec, layer, query_head):
    """Resolve the tail profile applying to one query head."""
    if spec.tail_profile != "mixed":
        return spec.tail_profile
    cycle = ("peaked", "heavy", "uniform")
    return cycle[(layer * spec.num_query_heads + query_head) % len(cycle)]


def _rng(spec, tag, layer, head):
    return np.random.default_rng(
        np.random.SeedSequence([spec.seed, tag, layer, head])
    )


def _unit(v):
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v
    return v / norm


def _multi_blob_direction(centers, chosen):
    """Minimum-norm direction with equal projection onto every chosen
    center, so the chosen blobs share the mass instead of one blob
    swallowing it through random cross-terms. Non-chosen centers whose
    projection would rival the shared level get pinned to zero, spending
    the spare degrees of freedom on leak suppression."""
    dim = centers.shape[1]
    chosen = list(chosen)
    suppressed = []
    while True:
        rows = centers[chosen + suppressed]
        targets = np.concatenate([np.ones(len(chosen)), np.zeros(len(suppressed))])
        u, *_ = np.linalg.lstsq(rows, targets, rcond=None)
        u = _unit(u)
        level = float(np.mean(centers[chosen] @ u))
        taken = set(chosen) | set(suppressed)
        others = [b for b in range(len(centers)) if b not in taken]
        if not others or len(taken) >= dim - 2:
            return u
        leaks = centers[others] @ u
        worst = int(np.argmax(leaks))
        if leaks[worst] <= 0.55 * level:
            return u
        suppressed.append(others[worst])


def _peaked_query(rng, centers, spec):
    # Most steps concentrate on a single blob; a minority spread the same
    # gain over several blobs at once and so need severalfold more tokens
    # for the same mass. The within-blob logit std is roughly
    # 3 * blob_spread.
    if rng.random() < 0.25:
        count = min(max(2, spec.num_blobs // 3), len(centers))
        chosen = rng.choice(len(centers), size=count, replace=False)
        direction = _multi_blob_direction(centers, chosen)
    else:
        direction = _unit(centers[int(rng.integers(len(centers)))])
    gain = 3.0 * rng.uniform(1.0, 1.3)
    return gain * np.sqrt(spec.head_dim) * direction


def _heavy_query(rng, centers, spec):
    count = max(2, spec.num_blobs // 4)
    count = min(count, len(centers))
    chosen = rng.choice(len(centers), size=count, replace=False)
    direction = _unit(np.sum([_unit(centers[b]) for b in chosen], axis=0))
    gain = 3.7 * rng.uniform(0.75, 1.25)
    return gain * np.sqrt(spec.head_dim) * direction


def generate(spec):
    """Materialize a workload; returns (KvCache, QueryTrace)."""
    n, d = spec.context_len, spec.head_dim
    keys = np.empty((spec.num_layers, spec.num_kv_heads, n, d), dtype=np.float32)
    values = np.empty_like(keys)
    centers = {}
    for layer in range(spec.num_layers):
        for head in range(spec.num_kv_heads):
            rng = _rng(spec, _TAG_KEYS, layer, head)
            c = rng.normal(0.0, spec.blob_separation, size=(spec.num_blobs, d))
            assignment = rng.integers(0, spec.num_blobs, size=n)
            keys[layer, head] = (
                c[assignment] + rng.normal(0.0, spec.blob_spread, size=(n, d))
            ).astype(np.float32)
            centers[layer, head] = c
            vrng = _rng(spec, _TAG_VALUES, layer, head)
            vcenters = vrng.normal(0.0, 1.0, size=(spec.num_blobs, d))
            values[layer, head] = (
                vcenters[assignment] + vrng.normal(0.0, 0.5, size=(n, d))
            ).astype(np.float32)

    queries = np.empty(
        (spec.num_steps, spec.num_layers, spec.num_query_heads, d), dtype=np.float32
    )
    for layer in range(spec.num_layers):
        for qhead in range(spec.num_query_heads):
            rng = _rng(spec, _TAG_QUERIES, layer, qhead)
            profile = profile_for_head(spec, layer, qhead)
            head_centers = centers[layer, qhead // spec.gqa_group]
            for step in range(spec.num_steps):
                if profile == "peaked":
                    q = _peaked_query(rng, head_centers, spec)
                elif profile == "heavy":
                    q = _heavy_query(rng, head_centers, spec)
                else:
                    q = np.zeros(d)
                queries[step, layer, qhead] = q.astype(np.float32)

    cache = KvCache(keys=keys, values=values)
    trace = QueryTrace(queries=queries, gqa_group=spec.gqa_group)
    return cache, trace
