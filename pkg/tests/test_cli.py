import csv
import json

import numpy as np
import pytest

from vidgait.cli import main
from vidgait.core import save_trial
from vidgait.model import ModelConfig, init_params
from vidgait.training import load_checkpoint

TINY_FLAGS = ["--layers", "1", "--heads", "1", "--embed-dim", "8", "--mlp-hidden", "16"]


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth", "--n", 20, "--seed", 7, "--duration", 3.5, 5.0, "--out", d) == 0
    return d


def test_synth_writes_files_and_manifest(tmp_path):
    out = tmp_path / "d"
    assert run("synth", "--n", 50, "--seed", 7, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n"] == 50 and len(manifest["files"]) == 50
    assert all((out / f).exists() for f in manifest["files"])
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 7 and cfg["n"] == 50 and cfg["ranges"]["cadence_spm"] == [60.0, 140.0]
    out2 = tmp_path / "d2"
    assert run("--seed", 7, "synth", "--n", 50, "--out", out2) == 0
    assert files(out) == files(out2)


def test_synth_infeasible(tmp_path, capsys):
    assert run("synth", "--n", 3, "--cadence", 300, 400, "--out", tmp_path) == 1
    assert "cadence" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert run("synth", "--n", "abc", "--out", tmp_path) == 1
    assert run("bogus") == 1
    assert run() == 1
    assert run("train", "--out", tmp_path) == 1
    assert run("synth", "--n", 2) == 1


def test_config_layering(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 3, "synth": {"n": 4, "noise_sigma_m": 0.002}}))
    out = tmp_path / "a"
    assert run("synth", "--config", cfg_file, "--out", out) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["n"] == 4 and resolved["seed"] == 3 and resolved["noise_sigma_m"] == 0.002
    out = tmp_path / "b"
    assert run("synth", "--config", cfg_file, "--n", 2, "--seed", 5, "--out", out) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["n"] == 2 and resolved["seed"] == 5
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path / "c") == 1


def test_train_checkpoint_and_trace(data, tmp_path):
    out = tmp_path / "t"
    assert run("train", "--data", data, "--epochs", 8, "--seed", 1, "--lr", 0.01, *TINY_FLAGS, "--out", out) == 0
    params, cfg, meta = load_checkpoint(out / "model.ckpt")
    assert cfg.epochs == 8 and meta["epochs"] == 8
    with open(out / "loss_trace.csv") as fh:
        trace = [float(r["loss"]) for r in csv.DictReader(fh)]
    assert len(trace) == 9
    slope = np.polyfit(np.arange(len(trace)), trace, 1)[0]
    assert slope < 0 and trace[-1] < trace[0]
    out2 = tmp_path / "t2"
    assert run("train", "--data", data, "--epochs", 8, "--seed", 1, "--lr", 0.01, *TINY_FLAGS, "--out", out2) == 0
    assert files(out) == files(out2)


def test_train_zero_epochs_is_init(data, tmp_path):
    out = tmp_path / "t0"
    assert run("train", "--data", data, "--epochs", 0, "--seed", 4, *TINY_FLAGS, "--out", out) == 0
    params, cfg, _ = load_checkpoint(out / "model.ckpt")
    ref = init_params(ModelConfig(**{**cfg.to_dict(), "buckets": cfg.buckets}))
    for k in ref:
        assert np.array_equal(np.asarray(ref[k]), np.asarray(params[k]))
    assert cfg.seed == 4


def test_train_skips_missing_targets(data, tmp_path, tiny_trial):
    d = tmp_path / "mixed"
    d.mkdir()
    for f in sorted(data.glob("synth_*.json"))[:3]:
        (d / f.name).write_bytes(f.read_bytes())
    save_trial(tiny_trial, d / "no_targets.json")
    out = tmp_path / "t"
    assert run("train", "--data", d, "--epochs", 1, *TINY_FLAGS, "--out", out) == 0
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["skipped"] == 1 and summary["trials"] == 3


def test_analyze_oracle_and_eval(data, tmp_path):
    out = tmp_path / "a"
    assert run("analyze", "--data", data, "--oracle-kinematics", "--out", out) == 0
    with open(out / "events.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["source"] for r in rows} == {"detected", "ground_truth"}
    with open(out / "params.csv") as fh:
        prow = list(csv.DictReader(fh))
    assert {r["source"] for r in prow} == {"est", "gt"}
    with open(out / "residuals.csv") as fh:
        res = list(csv.DictReader(fh))
    assert len(res) == 20 and max(float(r["reconstruction_residual"]) for r in res) < 1e-12
    ev = tmp_path / "e"
    assert run("eval", "--events", out / "events.csv", "--params", out / "params.csv", "--out", ev) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["events"]["all"]["median_abs"] < 0.033
    assert report["parameters"]["cadence"]["r"] > 0.999
    assert report["parameters"]["cadence"]["n"] == 40
    assert (ev / "histogram.csv").read_text().startswith("bin_start_s,bin_end_s,contact,off")
    assert (ev / "scatter.csv").exists()


def test_analyze_with_checkpoint(data, tmp_path):
    ck = tmp_path / "t"
    assert run("train", "--data", data, "--epochs", 0, *TINY_FLAGS, "--out", ck) == 0
    out = tmp_path / "a"
    assert run("analyze", "--data", data, "--checkpoint", ck / "model.ckpt", "--out", out) == 0
    assert (out / "events.csv").exists()
    assert run("analyze", "--data", data, "--out", tmp_path / "x") == 1
    assert run("analyze", "--data", data, "--checkpoint", tmp_path / "missing.ckpt", "--out", tmp_path / "x") == 2


def test_analyze_corrupt_file(data, tmp_path):
    d = tmp_path / "c"
    d.mkdir()
    for f in sorted(data.glob("synth_*.json"))[:2]:
        (d / f.name).write_bytes(f.read_bytes())
    (d / "broken.json").write_text("{ not a trial")
    out = tmp_path / "a"
    assert run("analyze", "--data", d, "--oracle-kinematics", "--out", out) == 2
    summary = json.loads((out / "analysis.json").read_text())
    assert summary["analyzed"] == 2
    assert [f["file"] for f in summary["failures"]] == ["broken.json"]


def test_calibrate_and_screen(tmp_path):
    out = tmp_path / "c"
    assert run("calibrate", "--synthetic-offset", 0.1, "--seed", 2, "--out", out) == 0
    rep = json.loads((out / "calibration.json").read_text())
    assert abs(rep["offset_s"] - 0.1) < 0.005 and rep["mean_huber_px"] < 0.1
    again = tmp_path / "c2"
    assert run("calibrate", "--problem", out / "problem.json", "--out", again) == 0
    assert json.loads((again / "calibration.json").read_text())["offset_s"] == pytest.approx(rep["offset_s"])
    s = tmp_path / "s"
    assert run("screen", "--result", out / "calibration.json", "--out", s) == 0
    assert json.loads((s / "screen.json").read_text()) == {"accepted": True, "reasons": []}
    assert run("screen", "--result", out / "calibration.json", "--sync-frames", 30, "--frac-missing", 0.3,
               "--out", s) == 0
    assert json.loads((s / "screen.json").read_text())["reasons"] == ["missing detections", "sync frames"]
    assert run("calibrate", "--out", tmp_path / "x") == 1
