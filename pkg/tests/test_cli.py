import json
import math
import shutil
from pathlib import Path

import pytest
import torch

from ds3m.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, THREADS_ENV, main
from ds3m.runconfig import parse_config

FIXTURES = Path(__file__).parent / "fixtures"

TOY_INI = """\
[run]
seed = 3
[data]
source = toy
length = 200
window = 10
splits = 100, 40, 40
[model]
hidden_dim = 4
[train]
max_epochs = 2
"""


def run_pipeline(root: Path, ini: str = TOY_INI, data: str = "run/data.csv"):
    """train -> predict -> segment -> evaluate inside ``root`` with relative paths."""
    (root / "cfg.ini").write_text(ini)
    assert main(["train", "--config", "cfg.ini", "--out", "run"]) == EXIT_OK
    assert main(["predict", "--checkpoint", "run/model.ckpt", "--data", data, "--out", "run/forecast.csv",
                 "--samples", "8"]) == EXIT_OK
    assert main(["segment", "--checkpoint", "run/model.ckpt", "--data", data, "--out", "run/segment.csv",
                 "--samples", "8"]) == EXIT_OK
    assert main(["evaluate", "--forecast", "run/forecast.csv", "--segmentation", "run/segment.csv",
                 "--truth", data, "--out", "run/metrics.json", "--manifest", "run/manifest.json"]) == EXIT_OK
    return json.loads((root / "run" / "metrics.json").read_text())


def test_rerun_is_byte_identical(tmp_path, monkeypatch):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        run_pipeline(d)
        outs.append(d / "run")
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == ["data.csv", "forecast.csv", "manifest.json", "metrics.json", "model.ckpt", "segment.csv",
                     "train_report.jsonl"]
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_csv_fixture_roundtrip(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    shutil.copy(FIXTURES / "load.csv", tmp_path / "load.csv")
    ini = ("[data]\nsource = load.csv\ntarget_columns = load, temp\nwindow = 8\nsplits = 120, 50, 50\n"
           "[model]\nhidden_dim = 3\n[train]\nmax_epochs = 2\n")
    m = run_pipeline(tmp_path, ini, data="load.csv")
    for key in ("forecast.rmse", "forecast.mape", "forecast.coverage"):
        assert m[key] is not None and math.isfinite(m[key]), key
    assert m["forecast.accuracy"] is None   # unlabelled table
    assert m["forecast.n"] == 50
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["metrics"]["forecast.rmse"] == m["forecast.rmse"]
    assert "data.csv" not in {p.name for p in (tmp_path / "run").iterdir()}


def test_baseline_kind(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    m = run_pipeline_baseline(tmp_path)
    assert math.isfinite(m["forecast.rmse"])


def run_pipeline_baseline(root):
    (root / "cfg.ini").write_text(TOY_INI.replace("hidden_dim = 4", "kind = baseline-gru\nhidden_dim = 4"))
    assert main(["train", "--config", "cfg.ini", "--out", "run"]) == EXIT_OK
    assert main(["predict", "--checkpoint", "run/model.ckpt", "--data", "run/data.csv",
                 "--out", "f.csv"]) == EXIT_OK
    # a baseline has no regimes to segment
    assert main(["segment", "--checkpoint", "run/model.ckpt", "--data", "run/data.csv", "--out", "s.csv"]) == EXIT_CONFIG
    assert main(["evaluate", "--forecast", "f.csv", "--out", "m.json"]) == EXIT_OK
    return json.loads((root / "m.json").read_text())


def test_existing_output_needs_force(tmp_path, capsys):
    out = tmp_path / "toy.csv"
    assert main(["simulate", "toy", "--length", "20", "--out", str(out)]) == EXIT_OK
    before = out.read_bytes()
    assert main(["simulate", "toy", "--length", "20", "--seed", "1", "--out", str(out)]) == EXIT_CONFIG
    assert "already exists" in capsys.readouterr().err
    assert out.read_bytes() == before
    assert main(["simulate", "toy", "--length", "20", "--seed", "1", "--out", str(out), "--force"]) == EXIT_OK
    assert out.read_bytes() != before


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_values_are_config_errors(tmp_path):
    for text in ("[train]\nmax_epochs = ten\n", "[model]\nfamily = poisson\n", "[predict]\ncoverage = 1.5\n",
                 "[extra]\na = 1\n", "[data]\nsplits = 1,2\n"):
        cfg = tmp_path / "c.ini"
        cfg.write_text(text)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG, text


def test_missing_inputs_are_data_errors(tmp_path, capsys):
    assert main(["predict", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", "x.csv",
                 "--out", str(tmp_path / "f.csv")]) == EXIT_DATA
    assert "nope.ckpt" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("y0\n1.0\nfoo\n")
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"[data]\nsource = {bad}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_too_short_data_is_data_error(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\nsource = toy\nlength = 50\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_divergence_exit_code(tmp_path, monkeypatch):
    from ds3m import cli

    def boom(*a, **k):
        raise cli.DivergenceError("non-finite loss at epoch 0, batch 0")

    monkeypatch.setattr(cli, "train", boom)
    cfg = tmp_path / "c.ini"
    cfg.write_text(TOY_INI)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DIVERGENCE


def test_thread_count_from_environment(monkeypatch, tmp_path):
    before = torch.get_num_threads()
    monkeypatch.setenv(THREADS_ENV, "1")
    try:
        main(["simulate", "toy", "--length", "5", "--out", str(tmp_path / "s.csv")])
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)


def test_report_aggregates(tmp_path):
    for i, v in enumerate([1.0, 2.0, 4.0]):
        (tmp_path / f"m{i}.json").write_text(json.dumps({"forecast.rmse": v, "forecast.label_permutation": [0, 1]}))
    out = tmp_path / "r.json"
    assert main(["report", *[str(tmp_path / f"m{i}.json") for i in range(3)], "--out", str(out)]) == EXIT_OK
    s = json.loads(out.read_text())["summary"]
    assert set(s) == {"forecast.rmse"}
    assert s["forecast.rmse"]["median"] == 2.0 and s["forecast.rmse"]["n"] == 3
    assert s["forecast.rmse"]["mean"] == pytest.approx(7 / 3)


def test_config_text_roundtrip():
    cfg = parse_config(TOY_INI + "[predict]\ncoverage = 0.8\n")
    assert parse_config(cfg.to_ini()) == cfg
    assert cfg.train_config().seed == 3 and cfg.data.splits == (100, 40, 40)
    lor = parse_config("[data]\nsource = lorenz\n")
    assert lor.data.window == 5 and lor.model_config(10).latent_dim == 3
