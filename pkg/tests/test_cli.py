from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import pytest

import polyct.cli as cli
from polyct.errors import SolverStallError, SweepCheckError

TINY = {
    "grid_side": 8,
    "n_views": 4,
    "n_cells": 12,
    "n_bins": 6,
    "n_windows": 2,
    "intensity": 1e4,
    "seeds": [0],
    "max_iters": 20,
    "record_wall_time": False,
    "constraint": {"type": "nonneg"},
}


def _config(tmp_path: Path, name: str = "config.json", **overrides: object) -> str:
    path = tmp_path / name
    path.write_text(json.dumps({**TINY, **overrides}), encoding="utf-8")
    return str(path)


@pytest.fixture(autouse=True)
def _no_logging(monkeypatch) -> None:
    monkeypatch.setattr(cli, "setup_logging", lambda **k: None)


def test_cli_exits_on_missing_config(tmp_path) -> None:
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["sweep", "--config", str(tmp_path / "missing.json")])
    assert excinfo.value.code == cli.EXIT_CONFIG_ERROR


def test_cli_exits_on_bad_scenario(tmp_path, capsys) -> None:
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["sweep", "--config", _config(tmp_path, scenario="nope"), "--out", str(tmp_path / "out")])
    assert excinfo.value.code == cli.EXIT_CONFIG_ERROR
    assert "scenario must be one of" in capsys.readouterr().err


def test_cli_rejects_non_object_config(tmp_path) -> None:
    path = tmp_path / "list.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["simulate", "--config", str(path)])
    assert excinfo.value.code == cli.EXIT_CONFIG_ERROR


def test_cli_rejects_unknown_config_suffix(tmp_path) -> None:
    path = tmp_path / "config.toml"
    path.write_text("grid_side = 8\n", encoding="utf-8")
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["simulate", "--config", str(path)])
    assert excinfo.value.code == cli.EXIT_CONFIG_ERROR


def test_phantom_writes_images_and_regions(tmp_path) -> None:
    out = tmp_path / "phantom"
    cfg = _config(tmp_path, grid_side=25, contrast_grid_side=16, n_views=3, n_cells=20)
    cli.main(["phantom", "--config", cfg, "--out", str(out)])
    for name in ("pmma.pgm", "pmma.csv", "iodine.pgm", "iodine.csv", "background.pgm"):
        assert (out / name).is_file()
    regions = json.loads((out / "phantom.json").read_text(encoding="utf-8"))
    assert set(regions) == {"pmma", "iodine"}
    assert regions["iodine"]


def test_simulate_then_reconstruct(tmp_path) -> None:
    data, rec = tmp_path / "data", tmp_path / "rec"
    cfg = _config(tmp_path)
    cli.main(["simulate", "--config", cfg, "--out", str(data)])
    for name in (cli.MATRIX_FILE, cli.SPECTRA_FILE, cli.COUNTS_FILE, cli.TRUTH_FILE, "simulate.json"):
        assert (data / name).is_file()
    meta = json.loads((data / "simulate.json").read_text(encoding="utf-8"))
    assert meta["n_rays"] == 4 * 12
    assert meta["n_windows"] == 2

    cli.main(["reconstruct", "--config", cfg, "--data", str(data), "--out", str(rec), "--solver", "exact"])
    summary = json.loads((rec / "reconstruction.json").read_text(encoding="utf-8"))
    assert summary["solver"] == "exact"
    assert summary["iterations"] >= 1
    assert summary["rmse"] is not None
    assert (rec / "reconstruction.pgm").is_file()
    assert (rec / "exact.trace.csv").is_file()


def test_reconstruct_without_truth_needs_constraint(tmp_path) -> None:
    data = tmp_path / "data"
    cli.main(["simulate", "--config", _config(tmp_path), "--out", str(data)])
    (data / cli.TRUTH_FILE).unlink()
    bare = _config(tmp_path, "bare.json", constraint=None)
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["reconstruct", "--config", bare, "--data", str(data), "--out", str(tmp_path / "rec")])
    assert excinfo.value.code == cli.EXIT_CONFIG_ERROR


def test_reconstruct_reports_missing_inputs(tmp_path) -> None:
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["reconstruct", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "rec")])
    assert excinfo.value.code == cli.EXIT_CONFIG_ERROR


def test_solver_failure_exits_with_solver_code(tmp_path, monkeypatch, capsys) -> None:
    data = tmp_path / "data"
    cfg = _config(tmp_path)
    cli.main(["simulate", "--config", cfg, "--out", str(data)])

    def _stall(solver, problem, cfg, **kwargs):
        raise SolverStallError(solver, 1, "zero subgradient")

    monkeypatch.setattr(cli, "run_solver", _stall)
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["reconstruct", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "rec")])
    assert excinfo.value.code == cli.EXIT_SOLVER_FAILURE
    assert "stalled" in capsys.readouterr().err


def test_failed_sweep_check_exits_with_check_code(tmp_path, monkeypatch, capsys) -> None:
    def _failing(cfg):
        raise SweepCheckError(cfg.scenario, ["converged[n-100_exact_seed-0]"], str(tmp_path / "sweep.json"))

    monkeypatch.setattr(cli, "run_experiment", _failing)
    cfg = _config(tmp_path, scenario="gaussian_samples_sweep")
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "out")])
    assert excinfo.value.code == cli.EXIT_CHECK_FAILED == 4
    assert "converged[n-100_exact_seed-0]" in capsys.readouterr().err


def test_theory_prints_json(tmp_path, capsys) -> None:
    out = tmp_path / "theory"
    cli.main(["theory", "--config", _config(tmp_path, theory_samples=10), "--out", str(out)])
    payload = json.loads(capsys.readouterr().out)
    assert payload["L_hat"] > 0.0
    assert payload["omega_bar_is_surrogate"] is True
    assert payload["nu_hat_is_estimate"] is True
    assert (out / "theory.json").is_file()


def test_log_config_resolution(monkeypatch) -> None:
    monkeypatch.delenv("POLYCT_LOG_FILE", raising=False)
    monkeypatch.delenv("POLYCT_LOG_LEVEL", raising=False)
    args = argparse.Namespace(log_file=None, verbose=False, quiet=False, log_level=None)
    assert cli._resolve_log_config(args) == ("polyct.log", logging.INFO)

    monkeypatch.setenv("POLYCT_LOG_FILE", "/tmp/sweep.log")
    monkeypatch.setenv("POLYCT_LOG_LEVEL", "warning")
    assert cli._resolve_log_config(args) == ("/tmp/sweep.log", logging.WARNING)

    args.log_level = "ERROR"
    assert cli._resolve_log_config(args)[1] == logging.ERROR
    args.quiet = True
    assert cli._resolve_log_config(args)[1] == logging.WARNING
    args.verbose = True
    assert cli._resolve_log_config(args)[1] == logging.DEBUG
