#!/usr/bin/env python3
"""Timing comparison between the compiled kernel backend and the NumPy
fallback, over the operations that dominate a decode step.

Run from a checkout:

    python3 benchmarks/bench_kernels.py --context 4096 --dim 64

Each cell is the median wall time of `--repeats` calls, in microseconds.
The end-to-end row times a full decode step (estimate + selection +
mixed attention) with each backend forced via the dispatcher contract.
"""

import argparse
import statistics
import time

import numpy as np

from doublep import _kernels_py

try:
    from doublep import _kernels_cy
except ImportError:
    _kernels_cy = None


def median_us(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(times)


def kernel_cases(n, d, k):
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(n, d)).astype(np.float32)
    q = rng.normal(size=d)
    w = rng.random(n)
    centroids = rng.normal(size=(k, d))
    logits = rng.normal(scale=5.0, size=n)
    sorted_probs = np.sort(rng.random(n))[::-1].copy()
    sorted_probs /= sorted_probs.sum()
    idx = rng.choice(n, size=n // 8, replace=False).astype(np.intp)

    return [
        ("scaled_logits", lambda impl: impl.scaled_logits(keys, q, 0.125)),
        ("gather_scaled_logits", lambda impl: impl.gather_scaled_logits(keys, idx, q, 0.125)),
        ("softmax", lambda impl: impl.softmax(logits)),
        ("logsumexp", lambda impl: impl.logsumexp(logits)),
        ("weighted_sum", lambda impl: impl.weighted_sum(w, keys)),
        ("nearest_centroid", lambda impl: impl.nearest_centroid(keys, centroids)),
        ("sorted_prefix_count", lambda impl: impl.sorted_prefix_count(sorted_probs, 0.95)),
    ]


def decode_case(n, d):
    from doublep.clustering import build_clustered_cache
    from doublep.engine import DoublePConfig, decode_step
    from doublep.workload import WorkloadSpec, generate

    spec = WorkloadSpec(
        context_len=n, head_dim=d, num_steps=1, tail_profile="peaked", seed=0
    )
    cache, trace = generate(spec)
    cc = build_clustered_cache(cache, sink=4, window=64, seed=0)
    cfg = DoublePConfig(p1=0.95, p2=0.7)
    q = trace.query(0, 0, 0)
    return lambda: decode_step(q, cache, cc, cfg, 0, 0)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--context", type=int, default=4096)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--clusters", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=25)
    args = parser.parse_args()

    backends = [("python", _kernels_py)]
    if _kernels_cy is not None:
        backends.append(("cython", _kernels_cy))
    else:
        print("compiled backend unavailable; timing the fallback only\n")

    print(f"context={args.context} dim={args.dim} clusters={args.clusters} "
          f"repeats={args.repeats}\n")
    header = f"{'kernel':<22}" + "".join(f"{name + ' (us)':>14}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    for name, call in kernel_cases(args.context, args.dim, args.clusters):
        cells = []
        for _, impl in backends:
            call(impl)  # warm up
            cells.append(median_us(lambda: call(impl), args.repeats))
        line = f"{name:<22}" + "".join(f"{c:>14.1f}" for c in cells)
        if len(cells) == 2:
            line += f"{cells[0] / cells[1]:>9.2f}x"
        print(line)

    # End-to-end decode step per backend. The dispatcher picks its backend at
    # import time from DOUBLEP_KERNELS, so this has to run in subprocesses.
    import subprocess
    import sys

    snippet = (
        "import time, statistics\n"
        "import benchmarks.bench_kernels as b\n"
        f"fn = b.decode_case({args.context}, {args.dim})\n"
        "fn()\n"
        f"print(b.median_us(fn, {args.repeats}))\n"
    )
    cells = []
    for name, _ in backends:
        out = subprocess.run(
            [sys.executable, "-c", snippet],
            env={"DOUBLEP_KERNELS": name, "PATH": "/usr/bin:/bin"},
            capture_output=True,
            text=True,
            cwd=".",
        )
        cells.append(float(out.stdout.strip()) if out.returncode == 0 else float("nan"))
    line = f"{'decode_step (e2e)':<22}" + "".join(f"{c:>14.1f}" for c in cells)
    if len(cells) == 2:
        line += f"{cells[0] / cells[1]:>9.2f}x"
    print(line)


if __name__ == "__main__":
    main()
