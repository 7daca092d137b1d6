"""Record attention tensors from a transformers model during greedy decode.

The model's attention calls are routed through a registered implementation
that wraps the stock eager path: outputs are identical to an unhooked run,
but the post-rotary queries, keys, values and the softmax weights pass
through a recorder on the way. A capture has two phases: one prefill
forward that populates the KV cache (keys and values are taken from this
call), then one forward per generated token (per-step queries and,
optionally, the runtime's own attention probabilities are taken from
these).

Because keys and values cover only the prompt while decode queries attend
over the growing cache, the recorded probabilities at step s span
``prompt_len + s + 1`` runtime columns. ``prefix_probabilities`` restricts
a row to the prompt columns and renormalizes, which is the runtime's
conditional distribution over exactly the tokens a dump exports.
"""

from dataclasses import dataclass

import numpy as np
import torch
from transformers import AttentionInterface, LlamaConfig, LlamaForCausalLM
from transformers.models.llama.modeling_llama import eager_attention_forward

ATTN_IMPLEMENTATION = "pyexport-capture"

SYNTHETIC_MODEL_ID = "synthetic-llama"

# Geometry of the built-in synthetic model: small enough to run anywhere,
# but with grouped-query attention and multiple layers so an export
# exercises the same bookkeeping a real checkpoint would. vocab_size=256
# lets raw prompt bytes double as token ids.
_SYNTHETIC_CONFIG = dict(
    hidden_size=64,
    num_attention_heads=4,
    num_key_value_heads=2,
    num_hidden_layers=2,
    intermediate_size=128,
    vocab_size=256,
    max_position_embeddings=512,
)


class CaptureError(RuntimeError):
    """Raised when recorded tensors do not line up with the model geometry."""


def build_synthetic_model(seed=0, dtype=torch.float32):
    """A deterministically initialized small Llama: random weights on the
    real runtime, for exercising the export path without a checkpoint."""
    config = LlamaConfig(**_SYNTHETIC_CONFIG)
    torch.manual_seed(seed)
    model = LlamaForCausalLM(config)
    return model.to(dtype).eval()


def encode_bytes(text):
    """Byte-level token ids for the synthetic model (vocab = 256)."""
    return list(text.encode("utf-8"))


def _to_f32(tensor):
    return tensor.detach().to(torch.float32).cpu().numpy()


class _Recorder:
    def __init__(self, keep_probabilities):
        self.keep_probabilities = keep_probabilities
        self.phase = None  # "prefill" | "decode"
        self.prefill = {}  # layer_idx -> (keys, values), each (Hkv, P, d)
        self.steps = []  # per decode forward: layer_idx -> (query, probs)
        self.scaling = {}  # layer_idx -> softmax scaling factor

    def begin_step(self):
        self.phase = "decode"
        self.steps.append({})

    def record(self, layer_idx, query, key, value, weights, scaling):
        self.scaling[layer_idx] = float(scaling)
        if self.phase == "prefill":
            if layer_idx in self.prefill:
                raise CaptureError(f"layer {layer_idx} seen twice during prefill")
            self.prefill[layer_idx] = (_to_f32(key[0]), _to_f32(value[0]))
        elif self.phase == "decode":
            step = self.steps[-1]
            if layer_idx in step:
                raise CaptureError(
                    f"layer {layer_idx} seen twice in one decode step"
                )
            probs = None
            if self.keep_probabilities:
                if weights is None:
                    raise CaptureError(
                        "runtime returned no attention weights to record"
                    )
                probs = _to_f32(weights[0, :, 0, :])
            step[layer_idx] = (_to_f32(query[0, :, 0, :]), probs)


_ACTIVE = None
_REGISTERED = False


def _capture_forward(
    module, query, key, value, attention_mask, scaling=None, dropout=0.0, **kwargs
):
    out, weights = eager_attention_forward(
        module, query, key, value, attention_mask, scaling, dropout=dropout, **kwargs
    )
    if _ACTIVE is not None:
        _ACTIVE.record(module.layer_idx, query, key, value, weights, scaling)
    return out, weights


def _ensure_registered():
    global _REGISTERED
    if not _REGISTERED:
        AttentionInterface.register(ATTN_IMPLEMENTATION, _capture_forward)
        _REGISTERED = True


@dataclass(frozen=True)
class GenerationCapture:
    """Everything recorded from one greedy run.

    keys/values cover only the prompt (shape (layers, kv_heads, prompt_len,
    head_dim)); queries are the per-step decode queries, unscaled, shape
    (steps, layers, query_heads, head_dim). probabilities, when recorded,
    holds one (layers, query_heads, prompt_len + step + 1) array per step.
    scaling is the per-layer softmax scaling factor the runtime applied.
    """

    prompt_len: int
    num_layers: int
    num_kv_heads: int
    num_query_heads: int
    head_dim: int
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    scaling: np.ndarray
    probabilities: list
    generated_ids: list

    @property
    def num_steps(self):
        return self.queries.shape[0]

    def prefix_probabilities(self, step, layer, query_head):
        """Runtime attention over the prompt columns only, renormalized.

        This is the distribution a dense recomputation from an exported
        dump should reproduce: the runtime's own probabilities conditioned
        on attending within the exported context.
        """
        if self.probabilities is None:
            raise CaptureError("probabilities were not recorded")
        row = self.probabilities[step][layer, query_head, : self.prompt_len]
        total = float(row.sum())
        if total <= 0.0:
            raise CaptureError("no attention mass on the prompt columns")
        return row.astype(np.float64) / total


def run_greedy(model, input_ids, steps, keep_probabilities=False):
    """Drive ``steps`` greedy decode forwards, recording along the way.

    input_ids is the 1-D prompt id sequence. The model's attention
    implementation is switched to the recording wrapper for the duration
    of the call and restored afterwards; outputs are unchanged because the
    wrapper delegates to the stock eager path.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ids = torch.as_tensor(list(input_ids), dtype=torch.long)
    if ids.ndim != 1 or ids.numel() == 0:
        raise ValueError("input_ids must be a nonempty 1-D sequence")

    _ensure_registered()
    recorder = _Recorder(keep_probabilities)
    previous = model.config._attn_implementation
    model.set_attn_implementation(ATTN_IMPLEMENTATION)
    global _ACTIVE
    _ACTIVE = recorder
    fed = []
    try:
        with torch.no_grad():
            recorder.phase = "prefill"
            out = model(ids.unsqueeze(0), use_cache=True)
            past = out.past_key_values
            next_id = int(out.logits[0, -1].argmax())
            for _ in range(steps):
                recorder.begin_step()
                fed.append(next_id)
                out = model(
                    torch.tensor([[next_id]], dtype=torch.long),
                    past_key_values=past,
                    use_cache=True,
                )
                past = out.past_key_values
                next_id = int(out.logits[0, -1].argmax())
    finally:
        _ACTIVE = None
        model.set_attn_implementation(previous)
    return _assemble(recorder, int(ids.numel()), fed)


def _assemble(recorder, prompt_len, generated_ids):
    if not recorder.prefill:
        raise CaptureError("no attention calls recorded during prefill")
    layer_ids = sorted(recorder.prefill)
    if layer_ids != list(range(len(layer_ids))):
        raise CaptureError(f"non-contiguous layer indices {layer_ids}")

    keys = np.stack([recorder.prefill[i][0] for i in layer_ids])
    values = np.stack([recorder.prefill[i][1] for i in layer_ids])
    if keys.shape != values.shape:
        raise CaptureError(
            f"key/value shape mismatch: {keys.shape} vs {values.shape}"
        )
    num_layers, num_kv_heads, context, head_dim = keys.shape
    if context != prompt_len:
        raise CaptureError(
            f"prefill cached {context} positions for a {prompt_len}-token prompt"
        )

    queries = []
    probabilities = [] if recorder.keep_probabilities else None
    for index, step in enumerate(recorder.steps):
        if sorted(step) != layer_ids:
            raise CaptureError(
                f"decode step {index} covered layers {sorted(step)}, "
                f"expected {layer_ids}"
            )
        queries.append(np.stack([step[i][0] for i in layer_ids]))
        if probabilities is not None:
            rows = np.stack([step[i][1] for i in layer_ids])
            if rows.shape[-1] != prompt_len + index + 1:
                raise CaptureError(
                    f"step {index} attention spans {rows.shape[-1]} columns, "
                    f"expected {prompt_len + index + 1}"
                )
            probabilities.append(rows)
    queries = np.stack(queries)

    num_query_heads = queries.shape[2]
    if queries.shape[3] != head_dim:
        raise CaptureError(
            f"query head_dim {queries.shape[3]} != key head_dim {head_dim}"
        )
    if num_query_heads % num_kv_heads != 0:
        raise CaptureError(
            f"{num_query_heads} query heads not divisible by "
            f"{num_kv_heads} kv heads"
        )

    return GenerationCapture(
        prompt_len=prompt_len,
        num_layers=num_layers,
        num_kv_heads=num_kv_heads,
        num_query_heads=num_query_heads,
        head_dim=head_dim,
        keys=keys,
        values=values,
        queries=queries,
        scaling=np.array([recorder.scaling[i] for i in layer_ids]),
        probabilities=probabilities,
        generated_ids=generated_ids,
    )
