import json
import subprocess
import sys

import pytest

from adsgd_lab.cli import main
from adsgd_lab.config import ExperimentConfig
from adsgd_lab.runner import OUTPUT_ENV


def _write(tmp_path, name="exp.ini", **kw):
    base = dict(n_agents=4, topology="ring", dim=2, alpha=0.05, max_updates=200, seeds=[0, 1])
    base.update(kw)
    path = tmp_path / name
    path.write_text(ExperimentConfig(**base).to_ini())
    return path


def test_run_writes_under_env_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "out"))
    cfg = _write(tmp_path)
    assert main(["run", str(cfg)]) == 0
    runs = sorted((tmp_path / "out").rglob("metrics.csv"))
    assert len(runs) == 2
    assert "seed=1" in capsys.readouterr().out


def test_run_seed_override_and_out_flag(tmp_path):
    cfg = _write(tmp_path)
    assert main(["run", str(cfg), "--seeds", "7", "--out", str(tmp_path / "o")]) == 0
    assert [p.parent.name for p in (tmp_path / "o").rglob("audit.json")] == ["seed_7"]


def test_divergence_exit_code(tmp_path):
    cfg = _write(tmp_path, alpha=50.0, max_updates=2000, seeds=[0])
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["report", str(tmp_path / "o")]) == 2


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nn_agents = 4\nfoo = 1\n")
    assert main(["run", str(bad)]) == 1
    assert "unknown key 'foo'" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.ini")]) == 1
    assert main(["bounds", "B=1"]) == 1
    assert main(["bounds", "B=1", "D=0", "speed=3"]) == 1
    assert main(["audit", str(tmp_path / "nothing.csv")]) == 1
    assert main(["report", str(tmp_path)]) == 1


def test_suite_audit_and_report(tmp_path, capsys):
    cfg = _write(tmp_path, seeds=[0], target_loss=1e9)
    out = tmp_path / "o"
    assert main(["suite", str(cfg), "--cases", "base", "comm_straggler", "--out", str(out)]) == 0
    traces = sorted(out.rglob("trace.csv"))
    assert len(traces) == 2
    capsys.readouterr()
    assert main(["audit", str(traces[0]), "--json", str(tmp_path / "a.json")]) == 0
    doc = json.loads(capsys.readouterr().out)
    saved = json.loads((traces[0].parent / "audit.json").read_text())
    for key in ("B_measured", "D_adsgd", "D_asbcd", "config_hash"):
        assert doc[key] == saved[key]
    assert json.loads((tmp_path / "a.json").read_text()) == doc
    assert main(["report", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert len(summary["runs"]) == 2 and summary["time_to_target"]["base/adsgd"]["4"] == 0.0


def test_bounds_verb(capsys):
    assert main(["bounds", "B=1", "D=0", "L=1", "n=1", "alpha=0.5", "K=100", "sigma2=1",
                 "f_gap=1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["C0"] == 0 and doc["lemma1_rhs"] == pytest.approx(0.41333333, abs=1e-6)
    assert main(["bounds", "B=2", "D=1", "L=1", "alpha=5"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["C1"] == 49 and doc["lemma1_rhs"] is None
    assert doc["flags"]["lemma1_alpha_admissible"] is False


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adsgd_lab", "bounds", "B=2", "D=1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and json.loads(proc.stdout)["C1"] == 49
