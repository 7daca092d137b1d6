"""Command-line front end for the exporter.

    pyexport --model ID --prompt-file F --steps S --layers L0,L1 --out PATH

writes the DPKV dump to PATH and the manifest to PATH.manifest.json.
Errors print one `pyexport: error: ...` line and exit nonzero.
"""

import argparse
import sys

from .capture import SYNTHETIC_MODEL_ID
from .exporter import export


def _layer_list(text):
    try:
        return [int(token) for token in text.split(",") if token.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pyexport",
        description="Export attention tensors from a greedy decode run "
        "into a DPKV dump plus JSON manifest.",
    )
    parser.add_argument(
        "--model",
        default=SYNTHETIC_MODEL_ID,
        help=f"checkpoint id or path, or {SYNTHETIC_MODEL_ID!r} for the "
        "built-in randomly initialized model (default)",
    )
    parser.add_argument("--prompt-file", required=True, help="UTF-8 prompt text")
    parser.add_argument(
        "--steps", type=int, default=16, help="greedy decode steps to record"
    )
    parser.add_argument(
        "--layers",
        type=_layer_list,
        default=None,
        help="comma-separated layer indices to export (default: all)",
    )
    parser.add_argument(
        "--dtype",
        choices=("float32", "float16", "bfloat16"),
        default="float32",
        help="compute dtype for the run; the dump is always 32-bit",
    )
    parser.add_argument(
        "--seed", type=int, default=0, help="weight seed for the synthetic model"
    )
    parser.add_argument("--out", required=True, help="DPKV output path")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.prompt_file, encoding="utf-8") as fh:
            prompt = fh.read()
        manifest = export(
            args.model,
            prompt,
            args.steps,
            args.out,
            layers=args.layers,
            dtype=args.dtype,
            seed=args.seed,
            prompt_source=args.prompt_file,
        )
    except Exception as exc:
        print(f"pyexport: error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {manifest.dump_path}: {manifest.num_layers} layers, "
        f"{manifest.num_query_heads} query heads, context {manifest.context_len}, "
        f"{manifest.num_steps} steps"
    )
    print(f"wrote {manifest.dump_path}.manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
