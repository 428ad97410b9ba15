import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from crossimpact import cli
from crossimpact.config import desk_config
from crossimpact.io import read_json, write_json


def run_cli(*argv):
    return cli.run([str(a) for a in argv])


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "desk.json"
    write_json(path, desk_config(n_bars=600, seed=3))
    return path


def test_simulate_writes_n_bars_rows(tmp_path, small_config):
    out = tmp_path / "bars.csv"
    assert run_cli("simulate", "--config", small_config, "--out", out, "--n-bars", 250) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 251
    assert rows[0][0] == "time" and rows[0][1] == "ES_price"
    manifest = read_json(tmp_path / "bars.manifest.json")
    assert manifest["command"] == "simulate" and manifest["seed"] == 3
    assert set(manifest) >= {"config_sha256", "versions", "outputs", "timestamp", "argv"}
    assert manifest["outputs"][str(out)] == cli._sha256_bytes(out.read_bytes())


def test_pipeline_is_byte_identical(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    names = ["bars.csv", "observables.json", "models.json", "scores.json", "curves.csv", "slopes.csv"]
    for d in (a, b):
        assert run_cli("pipeline", "--config", small_config, "--out-dir", d, "--n-bars", 3000) == 0
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    ma, mb = read_json(a / "manifest.json"), read_json(b / "manifest.json")
    assert ma["config_sha256"] == mb["config_sha256"]
    assert [cli._sha256_bytes((a / n).read_bytes()) for n in names] == [ma["outputs"][str(a / n)] for n in names]
    c = run_cli("pipeline", "--config", small_config, "--out-dir", tmp_path / "c", "--n-bars", 3000, "--seed", 4)
    assert c == 0 and (tmp_path / "c" / "bars.csv").read_bytes() != (a / "bars.csv").read_bytes()


def test_pipeline_outputs_layout(tmp_path, small_config):
    out = tmp_path / "run"
    assert run_cli("pipeline", "--config", small_config, "--out-dir", out, "--n-bars", 3000) == 0
    curves = list(csv.reader((out / "curves.csv").open()))
    slopes = list(csv.reader((out / "slopes.csv").open()))
    assert curves[0] == cli.CURVE_COLUMNS and slopes[0] == cli.SLOPE_COLUMNS
    assert len(slopes) == 1 + 16
    scores = read_json(out / "scores.json")
    assert [m["model"] for m in scores["models"]] == ["bs", "direct-2d", "direct-4d", "kyle-2d", "kyle-4d"]
    assert set(scores["models"][0]["scores"]) == {"spot", "level", "skew", "term"}
    obs = read_json(out / "observables.json")
    assert obs["leverage"]["rho"] < -0.5
    models = read_json(out / "models.json")
    assert models["Y"] == 0.5 and models["models"]["kyle-4d"]["generator"]["dim"] == 4


def test_round_trip_through_commands(tmp_path):
    cfg = tmp_path / "desk.json"
    write_json(cfg, desk_config())
    bars, obs, models, scores = (tmp_path / n for n in ("bars.csv", "obs.json", "models.json", "scores.json"))
    assert run_cli("simulate", "--config", cfg, "--out", bars) == 0
    assert run_cli("estimate", "--config", cfg, "--bars", bars, "--out", obs) == 0
    assert run_cli("fit", "--observables", obs, "--models", "kyle-full", "--Y", 0.5, "--out", models) == 0
    assert run_cli("evaluate", "--config", cfg, "--bars", bars, "--models", models, "--out", scores, "--curves", tmp_path / "c.csv") == 0
    report = read_json(scores)["models"][0]
    assert report["model"] == "kyle-full"
    assert report["scores"]["spot"]["r2"] == pytest.approx(0.5, abs=0.02)
    for n in ("bars", "obs", "models", "scores"):
        assert (tmp_path / f"{n}.manifest.json").exists()


def probe_inputs(tmp_path):
    rng = np.random.default_rng(0)
    b = rng.standard_normal((4, 4))
    b[2] = 0.0
    sigma = b @ b.T
    a = rng.standard_normal((4, 4))
    omega = a @ a.T + np.eye(4)
    write_json(tmp_path / "s.json", {"dim": 4, "data": sigma.ravel().tolist()})
    write_json(tmp_path / "o.json", omega.tolist())
    write_json(tmp_path / "v.json", [[0.0, 0.0, 1.0, 0.0]])
    return tmp_path / "s.json", tmp_path / "o.json", tmp_path / "v.json"


def test_probe_fragmentation(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    s, o, v = probe_inputs(tmp_path)
    assert run_cli("probe", "--check", "fragmentation", "--sigma", s, "--omega", o, "--kernel-basis", v) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["check"] == "fragmentation" and rep["passed"]
    for k in ("left_residual", "right_residual", "strong_residual"):
        assert rep[k] <= 1e-7 * rep["lambda_norm"]
    assert (tmp_path / "probe.manifest.json").exists()


def test_probe_cross_stability_and_consistency(tmp_path):
    s, o, v = probe_inputs(tmp_path)
    write_json(tmp_path / "pd.json", np.diag([1.0, 2.0, 3.0, 4.0]).tolist())
    out = tmp_path / "cs.json"
    assert run_cli("probe", "--check", "cross-stability", "--sigma", tmp_path / "pd.json", "--omega", o, "--illiquid-basis", v, "--out", out) == 0
    assert read_json(out)["passed"]
    out = tmp_path / "cc.json"
    assert run_cli("probe", "--check", "consistency", "--sigma", s, "--omega", o, "--Y", 0.5, "--out", out) == 0
    assert read_json(out)["residual"] <= 1e-9


def test_usage_errors(capsys, tmp_path):
    assert run_cli() == 1
    assert last_error(capsys)["exit_code"] == 1
    assert run_cli("nonsense") == 1
    assert run_cli("simulate") == 1
    s, o, _ = probe_inputs(tmp_path)
    assert run_cli("probe", "--check", "fragmentation", "--sigma", s, "--omega", o) == 1
    assert last_error(capsys)["error"] == "usage"


def test_data_errors(tmp_path, capsys):
    assert run_cli("estimate", "--config", tmp_path / "missing.json", "--bars", "x.csv", "--out", tmp_path / "o.json") == 2
    err = last_error(capsys)
    assert err["error"] == "data" and err["exit_code"] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("simulate", "--config", bad, "--out", tmp_path / "b.csv") == 2
    write_json(tmp_path / "cfg.json", {"models": ["kyle-9d"]})
    write_json(tmp_path / "obs.json", {})
    assert run_cli("fit", "--observables", tmp_path / "obs.json", "--config", tmp_path / "cfg.json", "--out", tmp_path / "m.json") == 2


def test_numerical_error_names_module_and_op(tmp_path, capsys):
    write_json(tmp_path / "s.json", [[1.0, 0.0], [0.0, -1.0]])
    write_json(tmp_path / "o.json", [[1.0, 0.0], [0.0, 1.0]])
    code = run_cli("probe", "--check", "consistency", "--sigma", tmp_path / "s.json", "--omega", tmp_path / "o.json", "--out", tmp_path / "r.json")
    assert code == 3
    err = last_error(capsys)
    assert err["type"] == "IndefiniteInput" and err["exit_code"] == 3
    assert err["module"] == "crossimpact.matlib" and err["op"] == "check_psd"


def test_numerical_error_carries_bar_index(tmp_path, capsys):
    cfg = desk_config(n_bars=50, dt=0.05)
    write_json(tmp_path / "c.json", cfg)
    assert run_cli("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "b.csv") == 3
    err = last_error(capsys)
    assert err["type"] == "StateInvalid" and err["bar_index"] == 10
    assert err["module"] == "crossimpact.simulator" and err["op"] == "simulate"


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "crossimpact.cli", "probe"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["error"] == "usage"
