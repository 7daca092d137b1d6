"""Turn a captured greedy run into a DPKV dump plus a JSON manifest.

The dump holds the prefill keys/values of the selected layers and the
per-step decode queries, up-converted to 32-bit. Queries are pre-scaled by
``scaling * sqrt(head_dim)`` so that the analysis package's fixed
``q.k / sqrt(d)`` logit convention reproduces the runtime's scaled logits
exactly (for standard scaling the factor is 1.0). The manifest is written
alongside as ``<out>.manifest.json`` and mirrors the dump header.
"""

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass

import torch
from doublep.kvcache import KvCache, QueryTrace, write_dump

from . import capture


class ExportError(RuntimeError):
    """Raised when an export cannot be completed; no partial files remain."""


_DTYPES = {
    "float32": torch.float32,
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
}


@dataclass(frozen=True)
class ExportManifest:
    """Provenance record for one dump; the six num_*/context fields match
    the DPKV header exactly."""

    model: str
    prompt_source: str
    layers_exported: list
    query_heads_exported: list
    num_layers: int
    num_kv_heads: int
    num_query_heads: int
    head_dim: int
    context_len: int
    num_steps: int
    gqa_group: int
    source_dtype: str
    query_scale: list
    dump_path: str

    def to_dict(self):
        return asdict(self)


def _load(model_id, torch_dtype, seed, prompt):
    if model_id == capture.SYNTHETIC_MODEL_ID:
        model = capture.build_synthetic_model(seed=seed, dtype=torch_dtype)
        ids = capture.encode_bytes(prompt)
    else:
        from transformers import AutoModelForCausalLM, AutoTokenizer

        try:
            tokenizer = AutoTokenizer.from_pretrained(model_id)
            model = (
                AutoModelForCausalLM.from_pretrained(model_id, dtype=torch_dtype)
                .eval()
            )
        except Exception as exc:
            raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
        ids = tokenizer.encode(prompt)
    if len(ids) == 0:
        raise ExportError("prompt is empty")
    return model, ids


def _validate_layers(layers, available):
    if layers is None:
        return list(range(available))
    selected = sorted(set(int(layer) for layer in layers))
    if not selected:
        raise ExportError("layer selection is empty")
    bad = [layer for layer in selected if layer < 0 or layer >= available]
    if bad:
        raise ExportError(
            f"layer selection {bad} out of range for a {available}-layer model"
        )
    return selected


def _write_json(payload, path):
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".json.tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export(
    model_id,
    prompt,
    steps,
    out_path,
    *,
    layers=None,
    dtype="float32",
    seed=0,
    prompt_source="<inline>",
):
    """Run greedy decode on ``model_id`` and write the dump and manifest.

    prompt is the prompt text; layers selects a subset of runtime layer
    indices (default: all). seed initializes the synthetic model's weights
    and is ignored for real checkpoints. Returns the ExportManifest. On
    any failure no output file is left behind.
    """
    if steps < 1:
        raise ExportError("steps must be >= 1")
    if dtype not in _DTYPES:
        raise ExportError(
            f"unknown dtype {dtype!r}; choose from {sorted(_DTYPES)}"
        )
    model, input_ids = _load(model_id, _DTYPES[dtype], seed, prompt)

    max_positions = int(model.config.max_position_embeddings)
    if len(input_ids) + steps > max_positions:
        raise ExportError(
            f"prompt ({len(input_ids)} tokens) plus {steps} steps exceeds "
            f"the model's {max_positions} positions"
        )

    cap = capture.run_greedy(model, input_ids, steps, keep_probabilities=False)
    selected = _validate_layers(layers, cap.num_layers)

    # Bake the runtime's softmax scaling into the stored queries so the
    # dump is self-contained under the 1/sqrt(d) convention.
    scale = cap.scaling[selected] * math.sqrt(cap.head_dim)
    queries = cap.queries[:, selected] * scale[None, :, None, None]
    try:
        cache = KvCache(keys=cap.keys[selected], values=cap.values[selected])
        trace = QueryTrace(
            queries=queries,
            gqa_group=cap.num_query_heads // cap.num_kv_heads,
        )
    except ValueError as exc:
        raise ExportError(f"captured tensors are inconsistent: {exc}") from exc

    out_path = os.fspath(out_path)
    manifest = ExportManifest(
        model=model_id,
        prompt_source=prompt_source,
        layers_exported=selected,
        query_heads_exported=list(range(cap.num_query_heads)),
        num_layers=cache.num_layers,
        num_kv_heads=cache.num_kv_heads,
        num_query_heads=trace.num_query_heads,
        head_dim=cache.head_dim,
        context_len=cache.context_len,
        num_steps=trace.num_steps,
        gqa_group=trace.gqa_group,
        source_dtype=dtype,
        query_scale=[float(s) for s in scale],
        dump_path=out_path,
    )
    write_dump(cache, trace, out_path)
    _write_json(manifest.to_dict(), f"{out_path}.manifest.json")
    return manifest
