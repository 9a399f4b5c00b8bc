import csv
import json
import warnings

import jsonschema
import pytest

from mixture_trader.backtest import BASELINES, REPORT_SCHEMA
from mixture_trader.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, OUTPUT_ROOT_ENV, main, sha256_file

SMALL_REGIMES = "data.regimes=M:0.0002:0.001:0:300;R:0:0.001:0.05:300"
FAST = ["--set", "pretrain_epochs=3", "--set", "imitation_epochs=1", "--set", "ppo_iterations=2",
        "--set", "hidden_dim=6"]


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


@pytest.fixture
def bars(out_root):
    assert main(["generate", "--out", "gen", "--set", SMALL_REGIMES]) == EXIT_OK
    return out_root / "gen" / "bars.csv"


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_generate_row_count_and_hash_stability(out_root):
    regimes = "data.regimes=M:0.0002:0.001:0:5000;R:0:0.001:0.05:5000"
    assert main(["generate", "--out", "a", "--set", regimes]) == EXIT_OK
    assert main(["generate", "--out", "b", "--set", regimes]) == EXIT_OK
    with open(out_root / "a" / "bars.csv") as fh:
        assert sum(1 for _ in csv.reader(fh)) == 10_001  # header + bars
    assert sha256_file(out_root / "a" / "bars.csv") == sha256_file(out_root / "b" / "bars.csv")
    m = manifest(out_root / "a")
    assert m["command"] == "generate" and m["seed"] == 0 and m["version"].startswith("v")


def test_invalid_generate_spec_exits_one(out_root, capsys):
    assert main(["generate", "--out", "x", "--set", "data.regimes=Q:1:1:1:10"]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_manifest_written_before_work_and_hashes_inputs(out_root, bars):
    # a failing run still leaves its manifest behind
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc = main(["train", "--data", str(bars), "--out", "t", "--set", "pretrain_lr=1e200", *FAST])
    assert rc != EXIT_OK
    m = manifest(out_root / "t")
    assert m["inputs"] == {str(bars.resolve()): sha256_file(bars)}
    assert m["input_roles"]["data"] == str(bars.resolve())
    assert m["config"]["pretrain_lr"] == "1e+200"


def test_numerical_abort_exits_two(out_root, bars, capsys):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rc = main(["train", "--data", str(bars), "--out", "t", "--set", "pretrain_lr=1e200", *FAST])
    assert rc == EXIT_NUMERICAL
    assert "numerical abort" in capsys.readouterr().err


def test_train_outputs_and_ablation_flags(out_root, bars):
    assert main(["train", "--data", str(bars), "--out", "t", *FAST]) == EXIT_OK
    d = out_root / "t"
    for name in ("checkpoint.json", "diagnostics.jsonl", "phases.log", "test_report.json", "test_series.csv",
                 "test_allocation.csv"):
        assert (d / name).exists(), name
    jsonschema.validate(json.loads((d / "test_report.json").read_text()), REPORT_SCHEMA)

    assert main(["train", "--data", str(bars), "--out", "no", "--no-ot", "--no-pretrain", *FAST]) == EXIT_OK
    m = manifest(out_root / "no")
    assert m["config"]["mixture.lambda_ot"] == "0.0" and m["config"]["pretrain"] == "false"
    rows = [json.loads(x) for x in open(out_root / "no" / "diagnostics.jsonl")]
    assert all("ot_loss" not in r for r in rows)
    assert (out_root / "no" / "phases.log").read_text().split() == ["imitation", "ppo"]

    assert main(["train", "--data", str(bars), "--out", "one", "--single-actor", *FAST]) == EXIT_OK
    assert manifest(out_root / "one")["config"]["mixture.k"] == "1"
    assert main(["train", "--data", str(bars), "--out", "three", "--actors", "3", *FAST]) == EXIT_OK
    assert json.loads((out_root / "three" / "checkpoint.json").read_text())["meta"]["k"] == 3


def test_backtest_baselines_and_checkpoint(out_root, bars):
    assert main(["backtest", "--data", str(bars), "--out", "bt"]) == EXIT_OK
    for name in BASELINES:
        jsonschema.validate(json.loads((out_root / "bt" / f"{name}_report.json").read_text()), REPORT_SCHEMA)
    assert main(["backtest", "--data", str(bars), "--out", "bt2"]) == EXIT_OK
    for name in BASELINES:
        for suffix in ("_report.json", "_series.csv"):
            f = f"{name}{suffix}"
            assert (out_root / "bt" / f).read_bytes().replace(b"bt", b"") == \
                (out_root / "bt2" / f).read_bytes().replace(b"bt2", b"")

    assert main(["train", "--data", str(bars), "--out", "t", *FAST]) == EXIT_OK
    ck = out_root / "t" / "checkpoint.json"
    assert main(["backtest", "--data", str(bars), "--checkpoint", str(ck), "--range", "test",
                 "--out", "bc"]) == EXIT_OK
    assert (out_root / "bc" / "checkpoint_report.json").read_text() == \
        (out_root / "t" / "test_report.json").read_text().replace("test_series", "checkpoint_series")


def test_unknown_baseline_lists_names(out_root, bars, capsys):
    assert main(["backtest", "--data", str(bars), "--baseline", "moonshot", "--out", "b"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert all(name in err for name in BASELINES)


def test_missing_data_exits_one(out_root):
    assert main(["train", "--data", str(out_root / "nope.csv"), "--out", "t"]) == EXIT_CONFIG


def test_rerun_is_byte_identical(out_root, bars):
    cfg = out_root / "run.cfg"
    cfg.write_text("seed = 3\n")
    assert main(["train", "--data", str(bars), "--config", str(cfg), "--out", "first", *FAST]) == EXIT_OK
    assert main(["rerun", str(out_root / "first" / "manifest.json"), "--out", "second"]) == EXIT_OK
    for name in ("diagnostics.jsonl", "checkpoint.json", "test_report.json"):
        assert (out_root / "first" / name).read_bytes() == (out_root / "second" / name).read_bytes()
    assert manifest(out_root / "second")["seed"] == 3
    cfg.write_text("seed = 4\n")
    assert main(["rerun", str(out_root / "first" / "manifest.json"), "--out", "third"]) == EXIT_CONFIG


def test_rerun_rejects_changed_input(out_root, bars):
    assert main(["backtest", "--data", str(bars), "--out", "b"]) == EXIT_OK
    with open(bars, "a") as fh:
        fh.write("\n")
    assert main(["rerun", str(out_root / "b" / "manifest.json"), "--out", "c"]) == EXIT_CONFIG


def test_defaults_prints_reference(capsys):
    assert main(["defaults"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "mixture.lambda_ot = 0.1" in out and "ppo.clip_eps = 0.2" in out
