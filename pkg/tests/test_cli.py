import csv
import json
import subprocess
import sys

import pytest
import yaml

from srpssm.cli import main
from srpssm.config import ConfigError, load_config, parse_config

BASE = {
    "model": {"family": "iid_gaussian"},
    "scenario": {"theta0": 0.0, "theta": 1.0, "omega": 1},
    "prior": {"lo": 0.5, "hi": 1.5, "nodes": 9},
    "detector": {"b": [2.0]},
    "harness": {"reps": 200, "seed": 3, "n_steps": 20},
    "output": {"formats": ["csv", "json"]},
}


def _write(tmp_path, cfg=None, **patch):
    cfg = json.loads(json.dumps(cfg or BASE))
    for key, val in patch.items():
        block, field = key.split("__")
        cfg.setdefault(block, {})[field] = val
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_simulate_writes_trajectory(tmp_path):
    path = _write(tmp_path)
    assert main(["simulate", str(path), "--out-dir", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "trajectory.csv")))
    assert len(rows) == 20
    report = json.load(open(tmp_path / "o" / "trajectory.json"))
    assert report["seed"] == 3 and report["config"]["model"]["family"] == "iid_gaussian"


def test_detect_stdin_alarms_immediately(tmp_path, monkeypatch, capsys):
    path = _write(tmp_path, detector__b=[1e-6])
    monkeypatch.setattr(sys, "stdin", __import__("io").StringIO("5.0\n0.0\n"))
    assert main(["detect", str(path), "--stdin", "--out-dir", str(tmp_path)]) == 0
    assert capsys.readouterr().out.split()[0] == "1"


def test_detect_stdin_rejects_text(tmp_path, monkeypatch, capsys):
    path = _write(tmp_path)
    monkeypatch.setattr(sys, "stdin", __import__("io").StringIO("abc\n"))
    assert main(["detect", str(path), "--stdin", "--out-dir", str(tmp_path)]) == 1
    assert "stdin" in capsys.readouterr().err


def test_detect_reports_censoring(tmp_path, capsys):
    path = _write(tmp_path, detector__b=[60.0], detector__max_steps=5)
    assert main(["detect", str(path), "--out-dir", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("censored 5")


def test_malformed_key_exit_code(tmp_path, capsys):
    path = _write(tmp_path, detector__bogus=1)
    assert main(["arl", str(path), "--out-dir", str(tmp_path)]) == 1
    assert "detector.bogus" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, capsys):
    path = _write(tmp_path, scenario__theta=0.0, scenario__omega=None, prior__density="point",
                  detector__b=[1.0], detector__rule="sr_point", detector__psi_particles=1000)
    assert main(["psi", str(path), "--out-dir", str(tmp_path)]) == 2
    assert "numerical failure [detectors" in capsys.readouterr().err


def test_arl_csv_and_report(tmp_path):
    path = _write(tmp_path, scenario__omega=None)
    assert main(["arl", str(path), "--out-dir", str(tmp_path), "--seed", "11", "--threads", "2"]) == 0
    row = next(csv.DictReader(open(tmp_path / "arl.csv")))
    assert list(row)[:8] == ["rule", "b", "omega", "theta", "estimate", "se", "n_eff", "n_cens"]
    assert json.load(open(tmp_path / "arl.json"))["seed"] == 11


def test_validate_single_criterion(tmp_path, capsys):
    assert main(["validate", "--criteria", "6", "--out-dir", str(tmp_path)]) == 0
    assert "[PASS] criterion 6" in capsys.readouterr().out


def test_entry_point_runs(tmp_path):
    path = _write(tmp_path)
    out = subprocess.run([sys.executable, "-m", "srpssm.cli", "simulate", str(path), "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr


def test_config_roundtrip_and_errors(tmp_path):
    cfg = load_config(_write(tmp_path))
    assert cfg.detector_config().b == 2.0 and cfg.grid().size == 9
    with pytest.raises(ConfigError) as exc:
        parse_config({**BASE, "harness": {"reps": 10}})
    assert exc.value.path == "harness.reps"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
