import csv
import json
from pathlib import Path

import pytest

from avrisk.cli import run_cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DESK = str(CONFIGS / "desk.json")
GAUSS = str(CONFIGS / "gaussian_d20.json")
STALL = str(CONFIGS / "constant_stall.json")


def cli(tmp_path, *argv, sub="out"):
    out = tmp_path / sub
    code = run_cli([*argv, "--out-dir", str(out)])
    return code, out


def test_naive_estimate_is_byte_identical(tmp_path):
    argv = ["estimate", "--method", "naive", "--config", DESK, "--gamma", "0.1", "--n", "1000", "--seed", "7"]
    c1, o1 = cli(tmp_path, *argv, sub="a")
    c2, o2 = cli(tmp_path, *argv, sub="b")
    assert c1 == c2 == 0
    assert (o1 / "estimate_naive.json").read_bytes() == (o2 / "estimate_naive.json").read_bytes()
    doc = json.loads((o1 / "estimate_naive.json").read_text())
    assert doc["n_evals"] == 1000 and doc["method"] == "naive"


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    code, _ = cli(tmp_path, "estimate", "--method", "naive", "--config", GAUSS, "--gamma", "0", "--bogus")
    assert code == 1
    assert "usage:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["estimate", "--method", "naive", "--gamma", "0"],
    ["estimate", "--method", "naive", "--config", "/nonexistent.json", "--gamma", "0"],
    ["estimate", "--method", "ams", "--config", GAUSS, "--gamma", "0", "--delta", "1.5"],
    ["estimate", "--method", "naive", "--config", GAUSS, "--gamma", "0", "--out", "../escape.json"],
    ["frobnicate"],
])
def test_usage_errors(tmp_path, argv):
    assert cli(tmp_path, *argv)[0] == 1
    assert not (tmp_path / "escape.json").exists()


def test_stall_exits_2_with_diagnostic(tmp_path, capsys):
    code, out = cli(tmp_path, "estimate", "--method", "ams", "--config", STALL, "--gamma", "0", "--n", "50")
    assert code == 2
    diag = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert diag["terminated"] == "stalled"
    assert '"terminated":"stalled"' in (out / "estimate.error.json").read_text()
    man = json.loads((out / "estimate.manifest.json").read_text())
    assert man["status"] == "failed"


def test_manifest_records_defaults(tmp_path):
    code, out = cli(tmp_path, "sample", "--config", GAUSS, "--n", "5")
    assert code == 0
    man = json.loads((out / "sample.manifest.json").read_text())
    assert man["seed"] == 0 and man["subcommand"] == "sample" and man["status"] == "ok"
    assert man["config"] == GAUSS and man["version"]
    assert man["started"] <= man["finished"]
    assert man["outputs"] == [str(out / "samples.jsonl")]
    lines = (out / "samples.jsonl").read_text().splitlines()
    assert len(lines) == 5 and len(json.loads(lines[0])["u"]) == 20


def test_outputs_stay_in_out_dir(tmp_path):
    code, out = cli(tmp_path, "simulate", "--config", DESK, "--n", "4", "--trace", "1")
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out"]
    assert sorted(p.name for p in out.iterdir()) == ["simulate.jsonl", "simulate.manifest.json", "trace_1.jsonl"]
    frame = json.loads((out / "trace_1.jsonl").read_text().splitlines()[0])
    assert len(frame["vehicles"]) == 6


def test_full_pipeline(tmp_path):
    o = tmp_path / "run"
    base = ["--config", GAUSS, "--out-dir", str(o)]
    assert run_cli(["estimate", "--method", "ams", "--gamma", "-2.5", "--n", "300", "--t-mcmc", "3",
                    "--failures-out", "failures.jsonl", *base]) == 0
    ams = json.loads((o / "estimate_ams.json").read_text())
    assert ams["terminated"] == "converged" and ams["levels"][-1]["L"] == -2.5
    recs = [json.loads(x) for x in (o / "failures.jsonl").read_text().splitlines()]
    assert recs and all(r["f"] < -2.5 for r in recs) and set(recs[0]) == {"id", "u", "x", "f"}

    assert run_cli(["train-flow", "--failures", str(o / "failures.jsonl"), "--epochs", "3", *base]) == 0
    model = json.loads((o / "flow.json").read_text())
    assert model["format"] == "avrisk-flow" and len(model["history"]) == 4

    assert run_cli(["is-estimate", "--model", str(o / "flow.json"), "--gamma", "-2.5", "--m", "2000",
                    "--repeat", "3", "--out", "is_runs.json", *base]) == 0
    assert run_cli(["estimate", "--method", "naive", "--gamma", "-2.5", "--n", "2000", "--repeat", "3",
                    "--out", "naive_runs.json", *base]) == 0
    assert run_cli(["compare", str(o / "naive_runs.json"), str(o / "is_runs.json"), *base]) == 0
    rows = list(csv.DictReader((o / "compare.csv").open()))
    assert [r["method"] for r in rows] == ["naive", "flow_is"]
    assert float(rows[1]["ratio"]) > 0

    assert run_cli(["analyze", "--failures", str(o / "failures.jsonl"), "--model", str(o / "flow.json"),
                    "--k", "3", *base]) == 0
    summary = json.loads((o / "analysis.json").read_text())
    assert sum(summary["cluster_sizes"]) == len(recs)
    assert len(summary["likelihood"]["median_log_prob"]) == 3
    rows = list(csv.reader((o / "analysis.csv").open()))
    assert rows[0] == ["id", "pc1", "pc2", "cluster"] and len(rows) == len(recs) + 1


@pytest.mark.parametrize("method", ["naive", "ams"])
def test_worker_counts_give_identical_bytes(tmp_path, method):
    argv = ["estimate", "--method", method, "--config", DESK, "--gamma", "4", "--n", "200",
            "--delta", "0.2", "--t-mcmc", "2", "--seed", "3"]
    _, o1 = cli(tmp_path, *argv, "--workers", "1", sub="w1")
    _, o8 = cli(tmp_path, *argv, "--workers", "8", sub="w8")
    name = f"estimate_{method}.json"
    assert (o1 / name).read_bytes() == (o8 / name).read_bytes()


def test_external_backend_flag(tmp_path):
    import sys
    cmd = f"{sys.executable} -m avrisk.echo_sim"
    code, out = cli(tmp_path, "simulate", "--config", GAUSS, "--n", "10", "--backend", "external",
                    "--sim-command", cmd, "--workers", "2")
    assert code == 0
    for line in (out / "simulate.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["f"] == rec["x"][0]
