from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from collections.abc import Callable
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from .constraints import constraint_from_dict
from .errors import ConfigError, ProjectionNotConvergedError, SolverDivergenceError, SolverStallError, SweepCheckError
from .experiments import (
    SOLVER_NAMES,
    ExperimentConfig,
    Problem,
    base_spectra,
    build_config_from_flat_dict,
    ct_constraint,
    ct_matrix,
    run_experiment,
    run_solver,
    run_theory_report,
    simulate_ct_problem,
)
from .export import (
    read_counts_csv,
    read_image_csv,
    read_matrix_triplets,
    to_json_text,
    write_counts_csv,
    write_image_csv,
    write_json,
    write_matrix_triplets,
    write_pgm,
    write_trace_csv,
)
from .geometry import make_contrast_scenario, make_pmma_phantom, pmma_regions
from .logging_utils import setup_logging
from .model import Spectrum, load_spectra, spectra_to_dict
from .problem import rmse

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_FAILURE = 3
EXIT_CHECK_FAILED = 4

MATRIX_FILE = "system_matrix.txt"
SPECTRA_FILE = "spectra.json"
COUNTS_FILE = "counts.csv"
TRUTH_FILE = "x_star.csv"


def _load_config_file(path: str | Path) -> dict[str, Any]:
    """Load a JSON or YAML config file. Raises ConfigError when it is missing or unreadable."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file does not exist: {p}")
    try:
        raw = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"could not read config file {p.name!r}: {exc!s}") from exc
    suf = p.suffix.lower()
    if suf == ".json":
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p.name!r}: {exc!s}") from exc
    elif suf in (".yaml", ".yml"):
        try:
            import yaml
        except ImportError as exc:
            raise ConfigError("YAML configs need PyYAML (pip install polyct[yaml])") from exc
        try:
            data = yaml.safe_load(raw) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {p.name!r}: {exc!s}") from exc
    else:
        raise ConfigError(f"config file must be .json, .yaml or .yml, got {p.name!r}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p.name!r} must hold an object")
    return data


def _add_output_and_ux_args(p: argparse.ArgumentParser | argparse._ArgumentGroup) -> None:
    p.add_argument(
        "--config",
        dest="config",
        default=None,
        metavar="FILE",
        help="Load options from a JSON or YAML file; CLI options override.",
    )
    p.add_argument(
        "--out",
        dest="out",
        default=None,
        metavar="DIR",
        help="Output directory (default: out_dir from the config, else ./runs).",
    )
    p.add_argument(
        "--workers",
        dest="workers",
        type=int,
        default=None,
        metavar="N",
        help="Parallel sweep workers (default: env POLYCT_WORKERS or 1).",
    )
    p.add_argument(
        "--quiet",
        dest="quiet",
        action="store_true",
        help="Less output (log level WARNING). Overridden by --verbose.",
    )
    p.add_argument(
        "--verbose",
        dest="verbose",
        action="store_true",
        help="More output (log level DEBUG). Overrides --quiet.",
    )
    p.add_argument(
        "--log-file",
        dest="log_file",
        default=None,
        metavar="PATH",
        help="Log file path (default: env POLYCT_LOG_FILE or polyct.log)",
    )
    p.add_argument(
        "--log-level",
        dest="log_level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Log level (default: env POLYCT_LOG_LEVEL or INFO). Overridden by --verbose/--quiet.",
    )


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polyct", description="Polychromatic CT simulation and reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)
    simulate = sub.add_parser("simulate", help="Simulate a phantom, system matrix and Poisson counts.")
    reconstruct = sub.add_parser("reconstruct", help="Reconstruct an image from files written by simulate.")
    reconstruct.add_argument(
        "--data",
        dest="data_dir",
        default=None,
        metavar="DIR",
        help="Directory holding system_matrix.txt, spectra.json, counts.csv and optionally x_star.csv.",
    )
    reconstruct.add_argument(
        "--solver",
        dest="solver",
        default=None,
        choices=list(SOLVER_NAMES),
        help="Solver to run (default: exact).",
    )
    sweep = sub.add_parser("sweep", help="Run the configured sweep scenario.")
    theory = sub.add_parser("theory", help="Print theory quantities for a simulated problem as JSON.")
    phantom = sub.add_parser("phantom", help="Write the PMMA and contrast phantoms.")
    for cmd in (simulate, reconstruct, sweep, theory, phantom):
        _add_output_and_ux_args(cmd.add_argument_group("Output and UX"))
    return p


def _resolve_log_config(args: argparse.Namespace) -> tuple[str, int]:
    """Resolve log file path and log level from args and env. Returns (log_file_path, log_level)."""
    log_file = getattr(args, "log_file", None) or os.environ.get("POLYCT_LOG_FILE") or "polyct.log"
    if getattr(args, "verbose", False):
        log_level = logging.DEBUG
    elif getattr(args, "quiet", False):
        log_level = logging.WARNING
    elif getattr(args, "log_level", None):
        log_level = getattr(logging, args.log_level)
    else:
        env_level = os.environ.get("POLYCT_LOG_LEVEL", "INFO").upper()
        log_level = getattr(logging, env_level, logging.INFO)
    return (log_file, log_level)


def _build_config_from_args(args: argparse.Namespace, file_defaults: dict[str, Any]) -> ExperimentConfig:
    data = dict(file_defaults)
    if args.out is not None:
        data["out_dir"] = args.out
    if args.workers is not None:
        data["workers"] = args.workers
    return build_config_from_flat_dict(data)


def _cmd_simulate(args: argparse.Namespace, file_defaults: dict[str, Any]) -> None:
    """Phantom, matrix, spectra and counts for the first seed, in the formats reconstruct reads."""
    cfg = _build_config_from_args(args, file_defaults)
    out = Path(cfg.out_dir)
    A = ct_matrix(cfg, cfg.n_views)
    spectra = base_spectra(cfg)
    problem = simulate_ct_problem(cfg, A, spectra, cfg.seeds[0])
    assert problem.x_star is not None
    write_matrix_triplets(out / MATRIX_FILE, A)
    write_json(out / SPECTRA_FILE, spectra_to_dict(spectra))
    write_counts_csv(out / COUNTS_FILE, problem.y)
    write_image_csv(out / TRUTH_FILE, problem.x_star)
    write_pgm(out / "x_star.pgm", problem.x_star, cfg.grid_side)
    write_json(
        out / "simulate.json",
        {
            "grid_side": cfg.grid_side,
            "n_views": cfg.n_views,
            "n_cells": cfg.n_cells,
            "seed": cfg.seeds[0],
            "n_rays": A.n_rows,
            "n_windows": spectra.n_windows,
            "electronic_noise_sigma": cfg.electronic_noise_sigma,
        },
    )
    logger.info("Simulated %d rays x %d windows into %s", A.n_rows, spectra.n_windows, out)


def _grid_side_for(d: int) -> int | None:
    side = math.isqrt(d)
    return side if side * side == d else None


def _cmd_reconstruct(args: argparse.Namespace, file_defaults: dict[str, Any]) -> None:
    cfg = _build_config_from_args(args, file_defaults)
    data_dir = Path(args.data_dir or file_defaults.get("data_dir") or cfg.out_dir)
    solver = args.solver or str(file_defaults.get("solver", "exact"))
    if solver not in SOLVER_NAMES:
        raise ConfigError(f"solver must be one of {list(SOLVER_NAMES)}, got {solver!r}")
    for name in (MATRIX_FILE, SPECTRA_FILE, COUNTS_FILE):
        if not (data_dir / name).is_file():
            raise ConfigError(f"missing input file {data_dir / name}")
    A = read_matrix_triplets(data_dir / MATRIX_FILE)
    spectra = load_spectra(data_dir / SPECTRA_FILE)
    y = read_counts_csv(data_dir / COUNTS_FILE)
    x_star = read_image_csv(data_dir / TRUTH_FILE) if (data_dir / TRUTH_FILE).is_file() else None
    side = _grid_side_for(A.n_cols)
    if cfg.constraint is not None:
        X = constraint_from_dict(cfg.constraint, d=A.n_cols, x_star=x_star)
    elif x_star is not None and side is not None:
        X = ct_constraint(cfg, x_star, side)
    else:
        raise ConfigError("no constraint configured and no x_star.csv to derive the TV radius from")
    problem = Problem(A, spectra, y, x_star, X, np.zeros(A.n_cols), side)
    x_hat, trace = run_solver(solver, problem, cfg)
    out = Path(cfg.out_dir)
    write_image_csv(out / "reconstruction.csv", x_hat)
    if side is not None:
        write_pgm(out / "reconstruction.pgm", x_hat, side)
    write_trace_csv(out / f"{solver}.trace.csv", trace)
    write_json(
        out / "reconstruction.json",
        {
            "solver": solver,
            "iterations": trace.iterations,
            "converged": trace.converged,
            "step_size": trace.step_size,
            "rmse": None if x_star is None else rmse(x_hat, x_star),
        },
    )


def _cmd_sweep(args: argparse.Namespace, file_defaults: dict[str, Any]) -> None:
    run_experiment(_build_config_from_args(args, file_defaults))


def _cmd_theory(args: argparse.Namespace, file_defaults: dict[str, Any]) -> None:
    report = run_theory_report(_build_config_from_args(args, file_defaults))
    sys.stdout.write(to_json_text(report))


def _cmd_phantom(args: argparse.Namespace, file_defaults: dict[str, Any]) -> None:
    cfg = _build_config_from_args(args, file_defaults)
    out = Path(cfg.out_dir)
    pmma = make_pmma_phantom(cfg.grid_side)
    write_pgm(out / "pmma.pgm", pmma, cfg.grid_side)
    write_image_csv(out / "pmma.csv", pmma)
    side = cfg.contrast_grid_side
    spectrum = base_spectra(cfg).windows[0]
    if not isinstance(spectrum, Spectrum):
        raise ConfigError("the contrast phantom needs shared-weight spectra")
    A = ct_matrix(cfg, cfg.n_views, side)
    scenario = make_contrast_scenario(side, A, spectrum, background_scale=cfg.background_scale)
    write_pgm(out / "iodine.pgm", scenario.unknown, side)
    write_pgm(out / "background.pgm", scenario.water + 2.0 * scenario.bone, side)
    write_image_csv(out / "iodine.csv", scenario.unknown)
    regions = {
        "pmma": [asdict(r) for r in pmma_regions(cfg.grid_side)],
        "iodine": [asdict(r) for r in scenario.regions],
    }
    write_json(out / "phantom.json", regions)


COMMANDS: dict[str, Callable[[argparse.Namespace, dict[str, Any]], None]] = {
    "simulate": _cmd_simulate,
    "reconstruct": _cmd_reconstruct,
    "sweep": _cmd_sweep,
    "theory": _cmd_theory,
    "phantom": _cmd_phantom,
}


def main(argv: list[str] | None = None) -> None:
    parser = _build_parser()
    args = parser.parse_args(argv)

    log_file, log_level = _resolve_log_config(args)
    setup_logging(log_file=log_file, level=log_level)

    try:
        file_defaults = _load_config_file(args.config) if getattr(args, "config", None) else {}
        COMMANDS[args.command](args, file_defaults)
    except (SolverDivergenceError, SolverStallError, ProjectionNotConvergedError) as exc:
        logger.error("Solver failed: %s", exc)
        print(f"Solver failed: {exc!s}", file=sys.stderr)
        raise SystemExit(EXIT_SOLVER_FAILURE) from exc
    except SweepCheckError as exc:
        logger.error("Sweep check failed: %s", exc)
        print(f"Sweep check failed: {exc!s}", file=sys.stderr)
        raise SystemExit(EXIT_CHECK_FAILED) from exc
    except ValueError as exc:
        logger.error("Invalid input: %s", exc)
        print(f"Error: {exc!s}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG_ERROR) from exc
