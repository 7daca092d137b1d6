"""Export attention tensors from a transformers runtime into DPKV dumps."""

from .capture import (
    ATTN_IMPLEMENTATION,
    SYNTHETIC_MODEL_ID,
    CaptureError,
    GenerationCapture,
    build_synthetic_model,
    encode_bytes,
    run_greedy,
)
from .exporter import ExportError, ExportManifest, export

__version__ = "0.1.0"

__all__ = [
    "ATTN_IMPLEMENTATION",
    "SYNTHETIC_MODEL_ID",
    "CaptureError",
    "GenerationCapture",
    "build_synthetic_model",
    "encode_bytes",
    "run_greedy",
    "ExportError",
    "ExportManifest",
    "export",
]
