import json
import os
import subprocess
import sys

import pytest

from jumpflow.cli import main


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_scenario_list(capsys):
    assert main(["scenario", "list"]) == 0
    out = capsys.readouterr().out
    for name in ("pure-drift", "compound-poisson", "ou-jump", "rough-drift", "two-sided-jumps"):
        assert name in out


def test_simulate_files_and_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "--scenario", "compound-poisson", "--n", "100000", "--dt", "1e-3", "--seed", "7"]
    assert main(args + ["--out", str(a)]) == 0
    summary = json.loads((a / "summary.json").read_text())
    assert summary["n_paths"] == 100000 and summary["seed"] == 7
    assert (a / "ensemble.csv").exists() and (a / "config.echo.json").exists()
    assert main(args + ["--out", str(b)]) == 0
    assert read(a / "ensemble.csv") == read(b / "ensemble.csv")
    assert read(a / "summary.json") == read(b / "summary.json")


def test_config_echo_reproduces_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--scenario", "ou-jump", "--n", "2000", "--dt", "1e-2", "--seed", "3", "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(a / "config.echo.json"), "--out", str(b)]) == 0
    assert read(a / "ensemble.csv") == read(b / "ensemble.csv")


def test_epsilon_switches_to_regularized(tmp_path):
    out = tmp_path / "r"
    assert main(["simulate", "--scenario", "compound-poisson", "--n", "2000", "--dt", "1e-2", "--epsilon", "0.1",
                 "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["epsilon"] == 0.1


def test_verify_matched_and_negative_control(tmp_path):
    ok = tmp_path / "ok"
    base = ["verify", "--scenario", "ou-jump", "--n", "20000", "--dt", "1e-2", "--seed", "3"]
    assert main(base + ["--out", str(ok), "--probe", "growth"]) == 0
    growth = json.loads((ok / "growth.json").read_text())
    assert growth["passed"] and growth["constant_estimate"] > 0
    summary = json.loads((ok / "summary.json").read_text())
    assert summary["fail"] == 0 and summary["total"] > 0
    assert (ok / "residuals.csv").exists() and (ok / "martingale.csv").exists()

    bad = tmp_path / "bad"
    assert main(base + ["--out", str(bad), "--negative-control", "double-drift"]) == 1
    rows = (bad / "residuals.csv").read_text().splitlines()[1:]
    assert any(r.endswith(",fail") for r in rows)


def test_verify_from_ensemble_file(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--scenario", "compound-poisson", "--n", "5000", "--dt", "1e-2", "--seed", "1",
                 "--out", str(sim), "--export-times", "0,0.25,0.5,0.75,1"]) == 0
    out = tmp_path / "v"
    code = main(["verify", "--scenario", "compound-poisson", "--ensemble", str(sim / "ensemble.csv"),
                 "--out", str(out), "--times", "0.5,1"])
    assert code in (0, 1)
    assert (out / "residuals.csv").exists()


def test_usage_errors(tmp_path, capsys):
    assert main(["verify", "--scenario", "compound-poisson", "--ensemble", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "m")]) == 2
    assert main(["simulate", "--scenario", "no-such", "--out", str(tmp_path / "u")]) == 2
    assert "compound-poisson" in capsys.readouterr().err
    assert main(["chain", "--scenario", "compound-poisson", "--out", str(tmp_path / "c")]) == 2
    assert "--epsilons" in capsys.readouterr().err
    assert main(["verify", "--scenario", "compound-poisson", "--negative-control", "double-drift",
                 "--out", str(tmp_path / "z")]) == 2
    assert main(["fp-solve", "--scenario", "ou-jump", "--M", "6000", "--fp-dt", "0.01",
                 "--out", str(tmp_path / "f")]) == 2
    assert "dt <=" in capsys.readouterr().err


def test_chain_single_eps(tmp_path):
    out = tmp_path / "ch"
    assert main(["chain", "--scenario", "compound-poisson", "--epsilons", "0.1", "--n", "20000", "--dt", "1e-2",
                 "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["per_epsilon"][0]["epsilon"] == 0.1 and summary["fail"] == 0
    assert (out / "chain.csv").exists()


def test_fp_solve_files(tmp_path):
    out = tmp_path / "fp"
    assert main(["fp-solve", "--scenario", "compound-poisson", "--L", "10", "--M", "400", "--t-end", "1",
                 "--times", "0.5", "--out", str(out), "--svg"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mass_defect"] < 1e-10 and len(summary["files"]) == 3
    assert (out / "density.svg").read_text().startswith("<svg")


def test_threads_env_and_entry_point(tmp_path):
    env = dict(os.environ, JUMPFLOW_THREADS="2")
    out = tmp_path / "e"
    proc = subprocess.run(
        [sys.executable, "-m", "jumpflow.cli", "simulate", "--scenario", "pure-drift", "--n", "10", "--dt", "0.1",
         "--out", str(out)],
        env=env, capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads((out / "config.echo.json").read_text())["scenario"] == "pure-drift"
