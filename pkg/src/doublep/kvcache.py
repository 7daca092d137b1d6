"""In-memory KV cache plus the DPKV binary dump format.

One DPKV file carries every layer and head of a model's cache so a single
CLI invocation can sweep the whole dump. Layout, little-endian throughout:

    magic   4 bytes, ASCII "DPKV"
    version u32 = 1
    header  u32 x 6: num_layers, num_kv_heads, num_query_heads,
                     head_dim, context_len, num_steps
    payload for each layer, for each kv head:
                keys row-major (context_len x head_dim float32),
                then values row-major (same shape);
            then for each step, for each layer, for each query head:
                query vector (head_dim float32)
    trailer u32 CRC32 of the payload bytes

Values are stored in 32-bit IEEE-754 even when the source runtime emits
16-bit tensors; exporters up-convert. Files are deterministic: identical
inputs produce identical bytes.

``KvCache`` and ``QueryTrace`` are immutable after construction and safe
to share read-only across workers.
"""

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"DPKV"
VERSION = 1

_HEADER = struct.Struct("<6I")


class DumpFormatError(ValueError):
    """Raised when a file does not parse as a valid DPKV dump."""


def _as_f32(arr, name):
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite entries in {name}")
    return out


@dataclass(frozen=True)
class KvCache:
    """Dense per-(layer, kv-head) key/value matrices.

    keys, values: float32 arrays of shape
    (num_layers, num_kv_heads, context_len, head_dim).
    """

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        keys = _as_f32(self.keys, "keys")
        values = _as_f32(self.values, "values")
        if keys.ndim != 4:
            raise ValueError("keys must have shape (layers, kv_heads, context, dim)")
        if keys.shape != values.shape:
            raise ValueError(
                f"keys/values shape mismatch: {keys.shape} vs {values.shape}"
            )
        if min(keys.shape) < 1:
            raise ValueError(f"all cache dimensions must be positive, got {keys.shape}")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def num_layers(self):
        return self.keys.shape[0]

    @property
    def num_kv_heads(self):
        return self.keys.shape[1]

    @property
    def context_len(self):
        return self.keys.shape[2]

    @property
    def head_dim(self):
        return self.keys.shape[3]


@dataclass(frozen=True)
class QueryTrace:
    """Per-step decode queries for every layer and query head.

    queries: float32 array of shape
    (num_steps, num_layers, num_query_heads, head_dim); num_steps may be 0.
    Query head h reads the cache of kv head h // gqa_group.
    """

    queries: np.ndarray
    gqa_group: int

    def __post_init__(self):
        q = _as_f32(self.queries, "queries")
        if q.ndim != 4:
            raise ValueError("queries must have shape (steps, layers, q_heads, dim)")
        if min(q.shape[1:]) < 1:
            raise ValueError(f"layer/head/dim axes must be positive, got {q.shape}")
        if self.gqa_group < 1:
            raise ValueError("gqa_group must be >= 1")
        if q.shape[2] % self.gqa_group != 0:
            raise ValueError(
                f"num_query_heads {q.shape[2]} not divisible by gqa_group {self.gqa_group}"
            )
        object.__setattr__(self, "queries", q)

    @property
    def num_steps(self):
        return self.queries.shape[0]

    @property
    def num_layers(self):
        return self.queries.shape[1]

    @property
    def num_query_heads(self):
        return self.queries.shape[2]

    @property
    def head_dim(self):
        return self.queries.shape[3]

    def kv_head_for(self, query_head):
        return query_head // self.gqa_group

    def query(self, step, layer, query_head):
        """One float32 query vector of length head_dim."""
        return self.queries[step, layer, query_head]


def _check_pair(cache, trace):
    if trace.num_layers != cache.num_layers:
        raise ValueError(
            f"layer count mismatch: cache {cache.num_layers}, trace {trace.num_layers}"
        )
    if trace.head_dim != cache.head_dim:
        raise ValueError(
            f"head_dim mismatch: cache {cache.head_dim}, trace {trace.head_dim}"
        )
    if trace.num_query_heads != cache.num_kv_heads * trace.gqa_group:
        raise ValueError(
            "num_query_heads must equal num_kv_heads * gqa_group: "
            f"{trace.num_query_heads} != {cache.num_kv_heads} * {trace.gqa_group}"
        )


def write_dump(cache, trace, path):
    """Write a (cache, trace) pair as a DPKV file.

    The file appears atomically: payload is written to a temp file in the
    target directory and renamed on success, so failures leave no partial
    output.
    """
    _check_pair(cache, trace)
    header = _HEADER.pack(
        cache.num_layers,
        cache.num_kv_heads,
        trace.num_query_heads,
        cache.head_dim,
        cache.context_len,
        trace.num_steps,
    )
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".dpkv.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(header)
            crc = 0
            for layer in range(cache.num_layers):
                for head in range(cache.num_kv_heads):
                    for block in (cache.keys[layer, head], cache.values[layer, head]):
                        chunk = np.ascontiguousarray(block, dtype="<f4").tobytes()
                        crc = zlib.crc32(chunk, crc)
                        fh.write(chunk)
            chunk = np.ascontiguousarray(trace.queries, dtype="<f4").tobytes()
            crc = zlib.crc32(chunk, crc)
            fh.write(chunk)
            fh.write(struct.pack("<I", crc))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dump(path):
    """Parse a DPKV file back into (KvCache, QueryTrace).

    Returns fully validated structures or raises DumpFormatError; never
    yields partially initialized output.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise DumpFormatError("not a DPKV file")
    if len(blob) < 8 + _HEADER.size:
        raise DumpFormatError("truncated file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DumpFormatError(f"unsupported version {version}")
    layers, kv_heads, q_heads, dim, context, steps = _HEADER.unpack_from(blob, 8)
    for name, val in (
        ("num_layers", layers),
        ("num_kv_heads", kv_heads),
        ("num_query_heads", q_heads),
        ("head_dim", dim),
        ("context_len", context),
    ):
        if val < 1:
            raise DumpFormatError(f"invalid header: {name} = {val}")
    if kv_heads > q_heads or q_heads % kv_heads != 0:
        raise DumpFormatError(
            f"invalid header: num_query_heads {q_heads} not a multiple of num_kv_heads {kv_heads}"
        )

    kv_bytes = layers * kv_heads * 2 * context * dim * 4
    q_bytes = steps * layers * q_heads * dim * 4
    body_start = 8 + _HEADER.size
    expected = body_start + kv_bytes + q_bytes + 4
    if len(blob) < expected:
        raise DumpFormatError("truncated file")
    if len(blob) > expected:
        raise DumpFormatError("trailing bytes after trailer")

    payload = blob[body_start : body_start + kv_bytes + q_bytes]
    (crc_stored,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(payload) != crc_stored:
        raise DumpFormatError("corrupt payload")

    kv = np.frombuffer(payload, dtype="<f4", count=kv_bytes // 4).reshape(
        layers, kv_heads, 2, context, dim
    )
    queries = np.frombuffer(payload, dtype="<f4", offset=kv_bytes).reshape(
        steps, layers, q_heads, dim
    )
    try:
        cache = KvCache(keys=kv[:, :, 0].copy(), values=kv[:, :, 1].copy())
        trace = QueryTrace(queries=queries.copy(), gqa_group=q_heads // kv_heads)
    except ValueError as exc:
        raise DumpFormatError(f"invalid payload: {exc}") from exc
    return cache, trace
