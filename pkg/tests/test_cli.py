"""CLI tests: exit codes, emitted artifacts, and flag plumbing.

main() is invoked in-process so the suite stays fast; subcommand behavior is
exactly what a shell invocation would see.
"""

import csv
import json

import yaml

from granmpc.cli import main


def test_usage_errors_exit_2(tmp_path):
    out = str(tmp_path / "o")
    assert main(["run", "--runs", "0", "--out", out]) == 2
    assert main(["run", "--jobs", "0", "--out", out]) == 2
    assert main(["compare", "--runs", "0", "--out", out]) == 2
    assert main(["run", "--set", "bogus.key=1", "--out", out]) == 2
    assert main(["run", "--set", "novalue", "--out", out]) == 2
    assert main(["run", "--method", "nonsense", "--out", out]) == 2
    assert main(["no-such-command"]) == 2


def test_missing_config_file_exit_1(tmp_path):
    rc = main(["build-sets", "--config", str(tmp_path / "absent.yaml"),
               "--out", str(tmp_path / "o")])
    assert rc == 1


def test_build_sets_artifacts(tmp_path):
    out = tmp_path / "sets"
    assert main(["build-sets", "--out", str(out)]) == 0
    payload = json.loads((out / "sets.json").read_text(encoding="utf-8"))
    assert set(payload) == {"tube", "tightened_bounds", "covariance_schedule"}
    b = payload["tightened_bounds"]
    lo, hi = b["lane"]
    assert abs(lo + 0.22) < 0.05 and abs(hi - 2.22) < 0.05
    assert b["input_bound"] > 0 and b["velocity_bound"] > 0
    assert payload["tube"]["s"] >= 1
    assert len(payload["covariance_schedule"]["sigmas"]) > 1
    # effective config is echoed for provenance
    assert (out / "config.yaml").exists()


def test_run_single_episode(tmp_path):
    out = tmp_path / "run"
    rc = main(["run", "--method", "granular", "--runs", "1", "--seed", "0",
               "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["n_runs"] == 1
    assert summary["pass_rate"] == 1.0
    assert (out / "run_granular_0.jsonl").exists()
    with open(out / "summary.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["method"] == "granular"


def test_run_debug_trace(tmp_path):
    out = tmp_path / "trace"
    rc = main(["run", "--method", "granular", "--runs", "1", "--seed", "0",
               "--debug-trace", "--out", str(out)])
    assert rc == 0
    tpath = out / "trace_granular_0.jsonl"
    lines = tpath.read_text(encoding="utf-8").splitlines()
    assert lines
    row = json.loads(lines[0])
    assert row["k"] == 0 and isinstance(row["sqp"], list)


def test_overrides_echoed_in_config(tmp_path):
    out = tmp_path / "ovr"
    rc = main(["run", "--runs", "1", "--seed", "0", "--out", str(out),
               "--set", "world.max_steps=40", "--terminal-cost", "origin"])
    assert rc == 0
    cfg = yaml.safe_load((out / "config.yaml").read_text(encoding="utf-8"))
    assert cfg["world"]["max_steps"] == 40
    assert cfg["cost"]["terminal_cost"] == "origin"


def test_config_flag_reads_back_echoed_file(tmp_path):
    out1 = tmp_path / "a"
    assert main(["build-sets", "--out", str(out1)]) == 0
    out2 = tmp_path / "b"
    rc = main(["build-sets", "--config", str(out1 / "config.yaml"),
               "--out", str(out2)])
    assert rc == 0
    assert ((out1 / "sets.json").read_bytes()
            == (out2 / "sets.json").read_bytes())


def test_montecarlo_small_batch(tmp_path):
    out = tmp_path / "mc"
    rc = main(["montecarlo", "--method", "granular", "--runs", "2",
               "--seed", "0", "--jobs", "2", "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["n_runs"] == 2
    # montecarlo keeps the batch summary but not per-run trajectory dumps
    assert not list(out.glob("run_*.jsonl"))


def test_compare_report(tmp_path):
    out = tmp_path / "cmp"
    rc = main(["compare", "--runs", "1", "--seed", "0", "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "comparison.json").read_text(encoding="utf-8"))
    assert set(report["methods"]) == {"granular", "single-rsmpc", "single-rmpc"}
    assert report["n_runs"] == 1
    assert report["time_ratio_granular_vs_single_rsmpc"] > 0
    assert report["cost_ratio_granular_vs_single_rsmpc"] > 0
