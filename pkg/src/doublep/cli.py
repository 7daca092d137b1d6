"""Experiment runner: generate or ingest workloads, build clustered
caches, run attention methods against the dense oracle, sweep parameter
grids, and emit metric tables.

Subcommands:

- gen      synthesize a workload and write it as a dump file
- cluster  cluster a workload and report per-head clustering stats (JSON)
- run      run one method over every (layer, head, step); emit records
- sweep    run a parameter grid; emit per-configuration aggregates
- figs     recompute the standard analysis tables (budgets, recovery,
           cluster-error, tracking)

All outputs are deterministic given the seed: rows are emitted in
(layer, head, step) order, floats are rounded to 12 significant digits,
and files are written atomically (no partial output on failure).
"""

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import engine, metrics
from .clustering import build_clustered_cache
from .engine import PRESETS, DoublePConfig
from .kvcache import read_dump, write_dump
from .metrics import ExperimentRecord
from .workload import PROFILES, WorkloadSpec, generate

METHODS = ("full", "doublep", "token_topk", "cluster_topk", "token_topp_fixed")

CSV_COLUMNS = [
    "layer", "head", "step", "method", "p1", "p2", "k", "m", "B",
    "clusters_total", "clusters_selected", "clusters_exact", "exact_tokens",
    "est_mass", "recovered_mass", "violation", "rel_err",
]


@dataclass(frozen=True)
class RunConfig:
    """One method run over one workload."""

    workload: WorkloadSpec | None
    input_path: str | None
    method: str
    p1: float = 0.95
    p2: float = 0.7
    k: int | None = None
    m: int | None = None
    B: int | None = None
    target_p: float = 0.95
    clusters: int | None = None
    tokens_per_cluster: int = 32
    sink: int = 4
    window: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if (self.workload is None) == (self.input_path is None):
            raise ValueError("exactly one of workload or input_path must be given")


def _round12(value):
    return float(f"{value:.12g}")


def _load(config):
    if config.input_path is not None:
        return read_dump(config.input_path)
    return generate(config.workload)


def _doublep_config(config):
    return DoublePConfig(
        p1=config.p1,
        p2=config.p2,
        sink=config.sink,
        window=config.window,
        clusters=config.clusters,
        tokens_per_cluster=config.tokens_per_cluster,
    )


def run(config):
    """Execute one method over every (layer, query head, step).

    Returns ExperimentRecord rows in (layer, head, step) order. The dense
    oracle is recomputed for every record, so rel_err is always against
    ground truth.
    """
    cache, trace = _load(config)
    cc = None
    if config.method in ("doublep", "cluster_topk"):
        cc = build_clustered_cache(
            cache,
            k=config.clusters,
            sink=config.sink,
            window=config.window,
            seed=config.seed,
            tokens_per_cluster=config.tokens_per_cluster,
        )
    cfg = _doublep_config(config) if config.method == "doublep" else None

    records = []
    for layer in range(cache.num_layers):
        for head in range(trace.num_query_heads):
            kv_head = trace.kv_head_for(head)
            for step in range(trace.num_steps):
                q = trace.query(step, layer, head)
                full = engine.full_attention(q, cache, layer, kv_head)
                records.append(
                    _step_record(config, cache, cc, cfg, q, full, layer, head, kv_head, step)
                )
    return records


def _step_record(config, cache, cc, cfg, q, full, layer, head, kv_head, step):
    p1 = p2 = k = m = B = None
    clusters_total = clusters_selected = clusters_exact = None
    est_mass = None

    if config.method == "full":
        exact_tokens = cache.context_len
        recovered = 1.0
        rel_err = 0.0
    elif config.method == "doublep":
        out, plan, est = engine.decode_step(q, cache, cc, cfg, layer, kv_head)
        p1, p2 = config.p1, config.p2
        clusters_total = int(est.probs.size)
        clusters_selected = int(plan.stage1.selected.size)
        clusters_exact = int(plan.exact_clusters.size)
        exact_tokens = out.exact_token_count
        est_mass = plan.stage1.cumulative_mass
        recovered = metrics.recovered_mass(plan, q, cache)
        rel_err = metrics.output_error(out, full)
    elif config.method == "token_topk":
        if config.k is None:
            raise ValueError("method token_topk requires k")
        k = config.k
        out, recovered = engine.baseline_token_topk(q, cache, k, layer, kv_head)
        exact_tokens = out.exact_token_count
        rel_err = metrics.output_error(out, full)
    elif config.method == "cluster_topk":
        if config.m is None:
            raise ValueError("method cluster_topk requires m")
        m = config.m
        est = engine.estimate_cluster_distribution(q, cc, layer, kv_head)
        out = engine.baseline_cluster_topk(q, cache, cc, m, layer, kv_head)
        clusters_total = int(est.probs.size)
        clusters_selected = clusters_total
        clusters_exact = m
        exact_tokens = out.exact_token_count
        data = cc.estimation_data(layer, kv_head)
        exact_set = np.concatenate(
            [
                cc.sink_token_indices(),
                cc.window_token_indices(),
                *[data.clusters[int(i)].members for i in est.order[:m]],
            ]
        )
        weights, _ = engine.full_attention_weights(q, cache, layer, kv_head)
        recovered = float(weights[exact_set].sum())
        rel_err = metrics.output_error(out, full)
    else:  # token_topp_fixed
        if config.B is None:
            raise ValueError("method token_topp_fixed requires B")
        B = config.B
        out, recovered = engine.baseline_token_topp_fixed_budget(
            q, cache, B, config.target_p, layer, kv_head
        )
        exact_tokens = out.exact_token_count
        rel_err = metrics.output_error(out, full)

    return ExperimentRecord(
        layer=layer,
        head=head,
        step=step,
        method=config.method,
        p1=p1,
        p2=p2,
        k=k,
        m=m,
        B=B,
        clusters_total=clusters_total,
        clusters_selected=clusters_selected,
        clusters_exact=clusters_exact,
        exact_tokens=int(exact_tokens),
        est_mass=None if est_mass is None else _round12(est_mass),
        recovered_mass=_round12(recovered),
        violation=bool(recovered < config.target_p),
        rel_err=_round12(rel_err),
    )


def sweep(configs):
    """Run several configurations and aggregate each into one table row."""
    if not configs:
        raise ValueError("sweep needs at least one configuration")
    rows = []
    for config in configs:
        records = run(config)
        errs = np.array([r.rel_err for r in records])
        rows.append(
            {
                "method": config.method,
                "p1": config.p1 if config.method == "doublep" else None,
                "p2": config.p2 if config.method == "doublep" else None,
                "k": config.k,
                "m": config.m,
                "B": config.B,
                "records": len(records),
                "mean_rel_err": _round12(errs.mean()),
                "p50_rel_err": _round12(float(np.percentile(errs, 50))),
                "p90_rel_err": _round12(float(np.percentile(errs, 90))),
                "mean_exact_tokens": _round12(
                    float(np.mean([r.exact_tokens for r in records]))
                ),
                "violation_rate": _round12(
                    metrics.violation_rate(
                        [r.recovered_mass for r in records], configs[0].target_p
                    )
                ),
            }
        )
    return rows


def _record_row(record):
    row = {}
    for col in CSV_COLUMNS:
        row[col] = getattr(record, col)
    return row


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in columns])
    return buf.getvalue()


def _to_json(rows, columns):
    ordered = [{c: row[c] for c in columns} for row in rows]
    return json.dumps(ordered, indent=2) + "\n"


def _emit(text, out_path):
    if out_path is None:
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(out_path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".out")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit_rows(rows, columns, fmt, out_path):
    text = _to_csv(rows, columns) if fmt == "csv" else _to_json(rows, columns)
    _emit(text, out_path)


# ---------------------------------------------------------------------------
# argument parsing


def _add_workload_flags(parser):
    parser.add_argument("--n", type=int, help="context length")
    parser.add_argument("--d", type=int, help="head dimension")
    parser.add_argument("--layers", type=int, default=1)
    parser.add_argument("--kv-heads", type=int, default=1)
    parser.add_argument("--gqa-group", type=int, default=1)
    parser.add_argument("--steps", type=int, default=8)
    parser.add_argument("--blobs", type=int, default=8)
    parser.add_argument("--spread", type=float, default=0.3)
    parser.add_argument("--separation", type=float, default=1.0)
    parser.add_argument("--profile", choices=PROFILES, default="mixed")


def _add_cluster_flags(parser):
    parser.add_argument("--clusters", type=int, help="fixed cluster count per head")
    parser.add_argument("--tokens-per-cluster", type=int, default=32)
    parser.add_argument("--sink", type=int, default=4)
    parser.add_argument("--window", type=int, default=64)


def _add_threshold_flags(parser):
    parser.add_argument("--p1", type=float)
    parser.add_argument("--p2", type=float)
    parser.add_argument(
        "--preset", choices=sorted(PRESETS), help="named (p1, p2) pair"
    )


def _add_output_flags(parser):
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--out", help="output path (default: stdout)")


def _resolve_thresholds(args):
    p1, p2 = 0.95, 0.7
    if args.preset:
        p1, p2 = PRESETS[args.preset]
    if args.p1 is not None:
        p1 = args.p1
    if args.p2 is not None:
        p2 = args.p2
    return p1, p2


def _workload_from_args(args):
    if args.n is None or args.d is None:
        raise ValueError("--n and --d are required unless --input is given")
    return WorkloadSpec(
        context_len=args.n,
        head_dim=args.d,
        num_layers=args.layers,
        num_kv_heads=args.kv_heads,
        gqa_group=args.gqa_group,
        num_steps=args.steps,
        num_blobs=args.blobs,
        blob_spread=args.spread,
        blob_separation=args.separation,
        tail_profile=args.profile,
        seed=args.seed,
        sink=getattr(args, "sink", 4),
        window=getattr(args, "window", 64),
    )


def _input_or_workload(args):
    if args.input is not None:
        return None, args.input
    return _workload_from_args(args), None


def _cmd_gen(args):
    spec = _workload_from_args(args)
    cache, trace = generate(spec)
    write_dump(cache, trace, args.out)
    return 0


def _cmd_cluster(args):
    if args.input is not None:
        cache, _ = read_dump(args.input)
    else:
        cache, _ = generate(_workload_from_args(args))
    cc = build_clustered_cache(
        cache,
        k=args.clusters,
        sink=args.sink,
        window=args.window,
        seed=args.seed,
        tokens_per_cluster=args.tokens_per_cluster,
    )
    report = {
        "context_len": cache.context_len,
        "head_dim": cache.head_dim,
        "sink": args.sink,
        "window": args.window,
        "heads": [],
    }
    for layer in range(cache.num_layers):
        for head in range(cache.num_kv_heads):
            clusters = cc.clusters[layer][head]
            sizes = [c.size for c in clusters]
            report["heads"].append(
                {
                    "layer": layer,
                    "kv_head": head,
                    "clusters": len(clusters),
                    "min_size": min(sizes),
                    "mean_size": _round12(float(np.mean(sizes))),
                    "max_size": max(sizes),
                }
            )
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0


def _config_from_args(args, method=None, **overrides):
    workload, input_path = _input_or_workload(args)
    p1, p2 = _resolve_thresholds(args)
    base = dict(
        workload=workload,
        input_path=input_path,
        method=method or args.method,
        p1=p1,
        p2=p2,
        k=getattr(args, "k", None),
        m=getattr(args, "m", None),
        B=getattr(args, "B", None),
        target_p=args.target_p,
        clusters=args.clusters,
        tokens_per_cluster=args.tokens_per_cluster,
        sink=args.sink,
        window=args.window,
        seed=args.seed,
    )
    base.update(overrides)
    return RunConfig(**base)


def _cmd_run(args):
    records = run(_config_from_args(args))
    _emit_rows([_record_row(r) for r in records], CSV_COLUMNS, args.format, args.out)
    return 0


def _parse_grid(text, cast):
    return [cast(part) for part in text.split(",") if part]


def _cmd_sweep(args):
    workload, input_path = _input_or_workload(args)
    p1, p2 = _resolve_thresholds(args)
    p1_list = _parse_grid(args.p1_grid, float) if args.p1_grid else [p1]
    p2_list = _parse_grid(args.p2_grid, float) if args.p2_grid else [p2]
    k_list = _parse_grid(args.k_grid, int) if args.k_grid else [None]
    m_list = _parse_grid(args.m_grid, int) if args.m_grid else [None]
    B_list = _parse_grid(args.B_grid, int) if args.B_grid else [None]

    configs = []
    base = dict(
        workload=workload,
        input_path=input_path,
        target_p=args.target_p,
        clusters=args.clusters,
        tokens_per_cluster=args.tokens_per_cluster,
        sink=args.sink,
        window=args.window,
        seed=args.seed,
    )
    for method in args.methods.split(","):
        if method == "doublep":
            for a in p1_list:
                for b in p2_list:
                    configs.append(RunConfig(method=method, p1=a, p2=b, **base))
        elif method == "token_topk":
            for k in k_list:
                configs.append(RunConfig(method=method, k=k, **base))
        elif method == "cluster_topk":
            for m in m_list:
                configs.append(RunConfig(method=method, m=m, **base))
        elif method == "token_topp_fixed":
            for B in B_list:
                configs.append(RunConfig(method=method, B=B, **base))
        else:
            configs.append(RunConfig(method=method, **base))

    rows = sweep(configs)
    columns = [
        "method", "p1", "p2", "k", "m", "B", "records",
        "mean_rel_err", "p50_rel_err", "p90_rel_err",
        "mean_exact_tokens", "violation_rate",
    ]
    _emit_rows(rows, columns, args.format, args.out)
    return 0


# ---------------------------------------------------------------------------
# analysis tables


def _figs_budgets(args, cache, trace):
    """Adaptive per-step budgets next to fixed-budget captured mass."""
    ks = _parse_grid(args.k_list, int)
    rows = []
    for layer in range(cache.num_layers):
        for head in range(trace.num_query_heads):
            kv_head = trace.kv_head_for(head)
            for step in range(trace.num_steps):
                q = trace.query(step, layer, head)
                budget = metrics.adaptive_token_budget(
                    q, cache, args.target_p, layer, kv_head
                )
                for k in ks:
                    _, cap = engine.baseline_token_topk(q, cache, k, layer, kv_head)
                    rows.append(
                        {
                            "layer": layer, "head": head, "step": step,
                            "selector": f"top{k}", "budget": k,
                            "captured": _round12(cap),
                            "violation": cap < args.target_p,
                        }
                    )
                _, cap = engine.baseline_token_topk(q, cache, budget, layer, kv_head)
                rows.append(
                    {
                        "layer": layer, "head": head, "step": step,
                        "selector": "adaptive", "budget": budget,
                        "captured": _round12(cap),
                        "violation": cap < args.target_p,
                    }
                )
    return rows, ["layer", "head", "step", "selector", "budget", "captured", "violation"]


def _figs_recovery(args, cache, trace):
    """Recovered mass of the fixed-candidate-budget top-p baseline."""
    B = args.B or cache.context_len // 4
    rows = []
    for layer in range(cache.num_layers):
        for head in range(trace.num_query_heads):
            kv_head = trace.kv_head_for(head)
            for step in range(trace.num_steps):
                q = trace.query(step, layer, head)
                _, rec = engine.baseline_token_topp_fixed_budget(
                    q, cache, B, args.target_p, layer, kv_head
                )
                rows.append(
                    {
                        "layer": layer, "head": head, "step": step, "B": B,
                        "recovered": _round12(rec),
                        "violation": rec < args.target_p,
                    }
                )
    return rows, ["layer", "head", "step", "B", "recovered", "violation"]


def _figs_cluster_error(args, cache, trace, cc):
    """Per-rank cluster mass estimation error, averaged over steps."""
    rows = []
    for layer in range(cache.num_layers):
        for kv_head in range(cache.num_kv_heads):
            per_rank = []
            for step in range(trace.num_steps):
                q = trace.query(step, layer, kv_head * trace.gqa_group)
                errors, _ = metrics.cluster_approx_error(q, cache, cc, layer, kv_head)
                per_rank.append(errors)
            stacked = np.stack(per_rank)
            for rank in range(stacked.shape[1]):
                rows.append(
                    {
                        "layer": layer, "kv_head": kv_head, "rank": rank,
                        "mean_error": _round12(float(stacked[:, rank].mean())),
                        "max_error": _round12(float(stacked[:, rank].max())),
                    }
                )
    return rows, ["layer", "kv_head", "rank", "mean_error", "max_error"]


def _figs_tracking(args, cache, trace, cc, cfg):
    """Chosen exact-cluster counts against the minimal counts needed."""
    rows = []
    for layer in range(cache.num_layers):
        for head in range(trace.num_query_heads):
            kv_head = trace.kv_head_for(head)
            for step in range(trace.num_steps):
                q = trace.query(step, layer, head)
                out, plan, est = engine.decode_step(q, cache, cc, cfg, layer, kv_head)
                full = engine.full_attention(q, cache, layer, kv_head)
                rel_err = metrics.output_error(out, full)
                eps = args.epsilon or max(rel_err, 1e-12)
                needed, attained = metrics.min_clusters_for_error(
                    q, cache, cc, eps, layer, kv_head
                )
                rows.append(
                    {
                        "layer": layer, "head": head, "step": step,
                        "rel_err": _round12(rel_err),
                        "clusters_exact": int(plan.exact_clusters.size),
                        "min_clusters": needed,
                        "attained": attained,
                        "ratio": _round12(plan.exact_clusters.size / max(needed, 1)),
                    }
                )
    return rows, [
        "layer", "head", "step", "rel_err", "clusters_exact",
        "min_clusters", "attained", "ratio",
    ]


def _cmd_figs(args):
    if args.input is not None:
        cache, trace = read_dump(args.input)
    else:
        cache, trace = generate(_workload_from_args(args))
    p1, p2 = _resolve_thresholds(args)
    if args.table in ("cluster-error", "tracking"):
        cc = build_clustered_cache(
            cache,
            k=args.clusters,
            sink=args.sink,
            window=args.window,
            seed=args.seed,
            tokens_per_cluster=args.tokens_per_cluster,
        )
    if args.table == "budgets":
        rows, columns = _figs_budgets(args, cache, trace)
    elif args.table == "recovery":
        rows, columns = _figs_recovery(args, cache, trace)
    elif args.table == "cluster-error":
        rows, columns = _figs_cluster_error(args, cache, trace, cc)
    else:
        cfg = DoublePConfig(
            p1=p1, p2=p2, sink=args.sink, window=args.window,
            clusters=args.clusters, tokens_per_cluster=args.tokens_per_cluster,
        )
        rows, columns = _figs_tracking(args, cache, trace, cc, cfg)
    _emit_rows(rows, columns, args.format, args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="doublep",
        description="hierarchical top-p sparse attention experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="synthesize a workload dump")
    _add_workload_flags(p_gen)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen)

    p_cluster = sub.add_parser("cluster", help="cluster a workload, report stats")
    p_cluster.add_argument("--input", help="dump file path")
    _add_workload_flags(p_cluster)
    _add_cluster_flags(p_cluster)
    p_cluster.add_argument("--seed", type=int, default=0)
    p_cluster.add_argument("--out")
    p_cluster.set_defaults(func=_cmd_cluster)

    p_run = sub.add_parser("run", help="run one method, emit per-step records")
    p_run.add_argument("--input", help="dump file path")
    _add_workload_flags(p_run)
    _add_cluster_flags(p_run)
    _add_threshold_flags(p_run)
    p_run.add_argument("--method", choices=METHODS, required=True)
    p_run.add_argument("--k", type=int, help="token budget for token_topk")
    p_run.add_argument("--m", type=int, help="cluster budget for cluster_topk")
    p_run.add_argument("--B", type=int, help="candidate budget for token_topp_fixed")
    p_run.add_argument("--target-p", type=float, default=0.95)
    p_run.add_argument("--seed", type=int, default=0)
    _add_output_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter grid, emit aggregates")
    p_sweep.add_argument("--input", help="dump file path")
    _add_workload_flags(p_sweep)
    _add_cluster_flags(p_sweep)
    _add_threshold_flags(p_sweep)
    p_sweep.add_argument(
        "--methods", default="doublep", help="comma-separated method list"
    )
    p_sweep.add_argument("--p1-grid", help="comma-separated p1 values")
    p_sweep.add_argument("--p2-grid", help="comma-separated p2 values")
    p_sweep.add_argument("--k-grid", help="comma-separated k values")
    p_sweep.add_argument("--m-grid", help="comma-separated m values")
    p_sweep.add_argument("--B-grid", help="comma-separated B values")
    p_sweep.add_argument("--target-p", type=float, default=0.95)
    p_sweep.add_argument("--seed", type=int, default=0)
    _add_output_flags(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_figs = sub.add_parser("figs", help="recompute standard analysis tables")
    p_figs.add_argument(
        "--table",
        choices=("budgets", "recovery", "cluster-error", "tracking"),
        required=True,
    )
    p_figs.add_argument("--input", help="dump file path")
    _add_workload_flags(p_figs)
    _add_cluster_flags(p_figs)
    _add_threshold_flags(p_figs)
    p_figs.add_argument("--k-list", default="64,256,1024")
    p_figs.add_argument("--B", type=int, help="candidate budget (default n/4)")
    p_figs.add_argument("--epsilon", type=float, help="error bound for tracking")
    p_figs.add_argument("--target-p", type=float, default=0.95)
    p_figs.add_argument("--seed", type=int, default=0)
    _add_output_flags(p_figs)
    p_figs.set_defaults(func=_cmd_figs)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"doublep: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
