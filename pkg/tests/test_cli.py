import csv
import json

import numpy as np
import pytest

from doublep import cli
from doublep.cli import CSV_COLUMNS, RunConfig, main, run, sweep
from doublep.workload import WorkloadSpec


def spec(**over):
    base = dict(
        context_len=256, head_dim=16, num_steps=4, tail_profile="mixed", seed=3
    )
    base.update(over)
    return WorkloadSpec(**base)


def config(method="doublep", **over):
    base = dict(workload=spec(), input_path=None, method=method, window=32)
    base.update(over)
    return RunConfig(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_full_method_records_are_exact():
    records = run(config(method="full"))
    assert len(records) == 4
    assert all(r.rel_err == 0.0 for r in records)
    assert all(r.recovered_mass == 1.0 for r in records)
    assert all(r.exact_tokens == 256 for r in records)


def test_records_ordered_by_layer_head_step():
    c = config(
        method="doublep",
        workload=spec(num_layers=2, num_kv_heads=2, gqa_group=2, num_steps=2),
    )
    records = run(c)
    keys = [(r.layer, r.head, r.step) for r in records]
    assert keys == sorted(keys)
    assert len(records) == 2 * 4 * 2


def test_run_requires_method_parameters():
    with pytest.raises(ValueError, match="requires k"):
        run(config(method="token_topk"))
    with pytest.raises(ValueError, match="requires m"):
        run(config(method="cluster_topk"))
    with pytest.raises(ValueError, match="requires B"):
        run(config(method="token_topp_fixed"))


def test_run_config_validation():
    with pytest.raises(ValueError, match="unknown method"):
        RunConfig(workload=spec(), input_path=None, method="nope")
    with pytest.raises(ValueError, match="exactly one"):
        RunConfig(workload=spec(), input_path="x.dpkv", method="full")
    with pytest.raises(ValueError, match="exactly one"):
        RunConfig(workload=None, input_path=None, method="full")


def test_sweep_single_config_matches_run():
    c = config(method="doublep")
    rows = sweep([c])
    records = run(c)
    errs = [r.rel_err for r in records]
    assert rows[0]["records"] == len(records)
    assert rows[0]["mean_rel_err"] == pytest.approx(np.mean(errs), rel=1e-9)
    assert rows[0]["violation_rate"] == pytest.approx(
        np.mean([r.recovered_mass < 0.95 for r in records]), abs=1e-12
    )


def test_cli_run_deterministic_bytes(tmp_path):
    out1 = tmp_path / "a.csv"
    out2 = tmp_path / "b.csv"
    argv = [
        "run", "--n", "256", "--d", "16", "--steps", "3", "--profile", "peaked",
        "--method", "doublep", "--seed", "5", "--window", "32",
    ]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    rows = read_csv(out1)
    assert list(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == 3


def test_csv_and_json_carry_identical_values(tmp_path):
    argv = [
        "run", "--n", "256", "--d", "16", "--steps", "2", "--profile", "peaked",
        "--method", "doublep", "--seed", "1", "--window", "32",
    ]
    csv_path = tmp_path / "r.csv"
    json_path = tmp_path / "r.json"
    assert main(argv + ["--format", "csv", "--out", str(csv_path)]) == 0
    assert main(argv + ["--format", "json", "--out", str(json_path)]) == 0
    csv_rows = read_csv(csv_path)
    json_rows = json.loads(json_path.read_text())
    assert len(csv_rows) == len(json_rows)
    for c_row, j_row in zip(csv_rows, json_rows):
        for col in CSV_COLUMNS:
            c_val, j_val = c_row[col], j_row[col]
            if c_val == "":
                assert j_val is None
            elif col == "violation":
                assert (c_val == "1") == j_val
            elif isinstance(j_val, (int, float)) and not isinstance(j_val, bool):
                assert float(c_val) == j_val
            else:
                assert c_val == str(j_val)


def test_gen_roundtrip_matches_inline_run(tmp_path):
    dump = tmp_path / "w.dpkv"
    workload_flags = [
        "--n", "256", "--d", "16", "--steps", "3", "--profile", "heavy", "--seed", "9",
    ]
    assert main(["gen", *workload_flags, "--out", str(dump)]) == 0
    out_inline = tmp_path / "inline.csv"
    out_dump = tmp_path / "dump.csv"
    run_flags = ["--method", "doublep", "--window", "32", "--seed", "9"]
    assert main(["run", *workload_flags, *run_flags, "--out", str(out_inline)]) == 0
    assert main(["run", "--input", str(dump), *run_flags, "--out", str(out_dump)]) == 0
    assert out_inline.read_bytes() == out_dump.read_bytes()


def test_preset_sets_thresholds_and_flags_override(tmp_path):
    out = tmp_path / "p.csv"
    argv = [
        "run", "--n", "256", "--d", "16", "--method", "doublep", "--window", "32",
        "--preset", "qwen-default", "--out", str(out),
    ]
    assert main(argv) == 0
    row = read_csv(out)[0]
    assert (row["p1"], row["p2"]) == ("0.99", "0.8")
    assert main(argv + ["--p1", "0.9"]) == 0
    assert read_csv(out)[0]["p1"] == "0.9"


def test_fixed_budgets_violate_while_estimate_mass_holds(tmp_path):
    # heterogeneous workload: every fixed k leaves some violating steps,
    # while the doublep stage-1 estimated mass always reaches p1
    w = spec(context_len=512, num_kv_heads=2, gqa_group=2, num_steps=8, seed=13)
    rows = sweep(
        [
            RunConfig(workload=w, input_path=None, method="token_topk", k=k, window=32)
            for k in (16, 64, 256)
        ]
    )
    for row in rows:
        assert row["violation_rate"] > 0.0
    records = run(RunConfig(workload=w, input_path=None, method="doublep", window=32))
    assert all(r.est_mass >= r.p1 - 1e-9 for r in records)


def test_sweep_error_decreases_with_p1(tmp_path):
    w = spec(context_len=512, tail_profile="peaked", num_steps=8, seed=21)
    rows = sweep(
        [
            RunConfig(workload=w, input_path=None, method="doublep", p1=p1, p2=0.7,
                      window=32)
            for p1 in (0.8, 0.9, 0.99)
        ]
    )
    errs = [row["mean_rel_err"] for row in rows]
    assert errs[0] >= errs[1] >= errs[2]


def test_cluster_reports_stats(tmp_path, capsys):
    assert main(["cluster", "--n", "256", "--d", "16", "--window", "32"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["context_len"] == 256
    head = report["heads"][0]
    assert head["clusters"] >= 1
    assert head["min_size"] >= 1
    assert head["max_size"] >= head["min_size"]


@pytest.mark.parametrize("table", ["budgets", "recovery", "cluster-error", "tracking"])
def test_figs_tables_run(tmp_path, table):
    out = tmp_path / f"{table}.csv"
    argv = [
        "figs", "--table", table, "--n", "256", "--d", "16", "--steps", "2",
        "--profile", "peaked", "--window", "32", "--k-list", "16,64",
        "--out", str(out),
    ]
    assert main(argv) == 0
    rows = read_csv(out)
    assert rows


def test_error_paths_exit_nonzero(tmp_path, capsys):
    assert main(["run", "--input", str(tmp_path / "no.dpkv"), "--method", "full"]) == 1
    assert "doublep: error:" in capsys.readouterr().err
    assert main(["run", "--n", "256", "--d", "16", "--method", "token_topk"]) == 1
    assert "requires k" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["run", "--n", "256", "--d", "16", "--method", "bogus"])


def test_failed_run_leaves_no_output_file(tmp_path):
    target = tmp_path / "never.csv"
    rc = main(
        ["run", "--n", "256", "--d", "16", "--method", "token_topk",
         "--out", str(target)]
    )
    assert rc == 1
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_missing_workload_flags_rejected(capsys):
    assert main(["run", "--method", "full"]) == 1
    assert "--n and --d" in capsys.readouterr().err
