"""
Sweep harness: simulate data, run the configured solvers per (setting, solver, seed) cell,
write per-cell traces and results, then rebuild the summary from the per-cell result files.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Literal, cast

import numpy as np

from .constraints import ConstraintSet, Intersection, L2Ball, NonNegOrthant, TVBall, constraint_from_dict, tv_norm
from .data_paths import solver_defaults
from .errors import ConfigError, ProjectionNotConvergedError, SolverDivergenceError, SolverStallError, SweepCheckError
from .export import write_image_csv, write_json, write_json_or_csv, write_pgm, write_trace_csv
from .geometry import (
    CircularRegion,
    ParallelBeamGeometry,
    SystemMatrix,
    build_gaussian_matrix,
    build_radon_matrix,
    make_contrast_scenario,
    make_pmma_phantom,
    region_means,
)
from .logging_utils import cell_context
from .model import (
    Image,
    MeasurementSet,
    Spectrum,
    Window,
    WindowedSpectra,
    add_gaussian_noise,
    default_spectra,
    expected_counts,
    load_spectra,
    reparameterize_rays,
    sample_poisson,
)
from .problem import l1_loss, rmse
from .rng import make_rng
from .solvers import (
    SolverConfig,
    SolverTrace,
    StepRule,
    admm_poisson_solve,
    exact_solve,
    mse_gd_solve,
    polyak_sgm_solve,
    scaled_exact_step,
    step_size_rule,
)
from .theory import build_theory_report, lambda_max

logger = logging.getLogger(__name__)

Scenario = Literal[
    "ct_views_sweep",
    "ct_intensity_sweep",
    "gaussian_samples_sweep",
    "contrast_recovery",
    "theory_report",
]
SCENARIOS: frozenset[str] = frozenset(
    {"ct_views_sweep", "ct_intensity_sweep", "gaussian_samples_sweep", "contrast_recovery", "theory_report"}
)
SOLVER_NAMES: tuple[str, ...] = ("exact", "mse_gd", "polyak_sgm", "admm")
SUMMARY_FIELDS = [
    "setting",
    "solver",
    "n_runs",
    "n_failed",
    "rmse_mean",
    "rmse_std",
    "iterations_mean",
    "wall_ms_mean",
]
SAMPLES_FIELDS = ["seed", "n", "multiplier", "iterations", "converged", "final_dist"]
CONTRAST_FIELDS = ["seed", "roi", "truth", "recovered", "relative_error"]


def _default_workers() -> int:
    raw = (os.environ.get("POLYCT_WORKERS") or "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = "ct_views_sweep"
    out_dir: str = "runs"
    seeds: tuple[int, ...] = tuple(range(10))
    solvers: tuple[str, ...] = SOLVER_NAMES
    grid_side: int = 25
    n_views: int = 50
    n_cells: int = 50
    views: tuple[int, ...] = (5, 10, 25, 50)
    intensity: float = 1e6
    intensities: tuple[float, ...] = (1e3, 1e4, 1e5, 1e6)
    intensity_sweep_views: int = 10
    n_windows: int = 3
    n_bins: int = 50
    spectra_file: str | None = None
    constraint: dict[str, Any] | None = None
    max_iters: int = 5000
    convergence_tol: float = 1e-5
    electronic_noise_sigma: float = 0.0
    tune_baselines: bool = False
    record_wall_time: bool = True
    workers: int = field(default_factory=_default_workers)
    hu_map: dict[str, float] | None = None
    write_images: bool = True
    # Gaussian sample-size sweep
    dimension: int = 100
    x_star_norm: float = 3.0
    gaussian_step: float = 0.25
    sample_multipliers: tuple[int, ...] = (5, 10, 20, 40, 80)
    gaussian_tol: float = 1e-6
    gaussian_max_iters: int = 100_000
    # Contrast recovery
    contrast_grid_side: int = 32
    contrast_intensity: float = 1e3
    background_scale: float = 1.0
    # Theory report
    theory_samples: int = 200

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {sorted(SCENARIOS)}, got {self.scenario!r}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative")
        unknown = [s for s in self.solvers if s not in SOLVER_NAMES]
        if unknown or not self.solvers:
            raise ConfigError(f"solvers must be a nonempty subset of {list(SOLVER_NAMES)}, got {list(self.solvers)}")
        if self.spectra_file is not None and not Path(self.spectra_file).is_file():
            raise ConfigError(f"spectra_file does not exist: {self.spectra_file}")
        for name in ("grid_side", "n_views", "n_cells", "intensity_sweep_views", "n_windows", "n_bins", "dimension"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)!r}")
        if any(v < 1 for v in self.views) or not self.views:
            raise ConfigError("views must be a nonempty list of positive counts")
        if any(not i > 0 for i in self.intensities) or not self.intensity > 0 or not self.contrast_intensity > 0:
            raise ConfigError("intensities must be > 0")
        if self.max_iters < 1 or self.gaussian_max_iters < 1:
            raise ConfigError("iteration caps must be >= 1")
        if not self.convergence_tol > 0 or not self.gaussian_tol > 0:
            raise ConfigError("tolerances must be > 0")
        if self.electronic_noise_sigma < 0:
            raise ConfigError("electronic_noise_sigma must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.hu_map is not None and not {"slope", "intercept"} <= set(self.hu_map):
            raise ConfigError("hu_map needs 'slope' and 'intercept'")
        if self.contrast_grid_side < 16:
            raise ConfigError("contrast_grid_side must be >= 16")


_TUPLE_FIELDS = ("seeds", "solvers", "views", "intensities", "sample_multipliers")


def build_config_from_flat_dict(data: dict[str, Any]) -> ExperimentConfig:
    """Build ExperimentConfig from a flat dict of option names -> values. Unknown keys are ignored."""
    allowed = set(ExperimentConfig.__dataclass_fields__)
    kwargs = {k: v for k, v in data.items() if k in allowed}
    for key in _TUPLE_FIELDS:
        if key in kwargs:
            if not isinstance(kwargs[key], (list, tuple)):
                raise ConfigError(f"{key} must be a list")
            kwargs[key] = tuple(kwargs[key])
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc))


@dataclass(frozen=True, eq=False)
class Problem:
    A: SystemMatrix
    spectra: WindowedSpectra
    y: MeasurementSet
    x_star: Image | None
    X: ConstraintSet
    x1: Image
    grid_side: int | None = None


def base_spectra(cfg: ExperimentConfig, intensity: float | None = None) -> WindowedSpectra:
    level = cfg.intensity if intensity is None else intensity
    if cfg.spectra_file is not None:
        loaded = load_spectra(cfg.spectra_file)
        total = sum(float(np.mean(w.intensities(1))) for w in loaded.windows)
        return loaded if intensity is None else loaded.scaled(level / total)
    return default_spectra(intensity=level, n_bins=cfg.n_bins, n_windows=cfg.n_windows)


def ct_constraint(cfg: ExperimentConfig, x_star: Image, grid_side: int) -> ConstraintSet:
    """Configured constraint, or TV ball at the truth's TV intersected with the nonnegative orthant."""
    if cfg.constraint is not None:
        return constraint_from_dict(cfg.constraint, d=x_star.size, x_star=x_star)
    return Intersection(TVBall(tv_norm(x_star), grid_side), NonNegOrthant())


def ct_matrix(cfg: ExperimentConfig, n_views: int, grid_side: int | None = None) -> SystemMatrix:
    side = cfg.grid_side if grid_side is None else grid_side
    geom = ParallelBeamGeometry(n_views=n_views, n_cells=cfg.n_cells, grid_side=side, pixel_size=1.0 / side)
    return build_radon_matrix(geom)


def simulate_measurements(
    A: SystemMatrix, x_star: Image, spectra: WindowedSpectra, seed: int, sigma: float = 0.0
) -> MeasurementSet:
    """Poisson counts at x*, plus Gaussian electronic noise when sigma > 0."""
    y = sample_poisson(expected_counts(A, x_star, spectra), seed)
    if sigma > 0.0:
        y = add_gaussian_noise(y, sigma, seed)
    return y


def simulate_ct_problem(
    cfg: ExperimentConfig, A: SystemMatrix, spectra: WindowedSpectra, seed: int, grid_side: int | None = None
) -> Problem:
    side = cfg.grid_side if grid_side is None else grid_side
    x_star = make_pmma_phantom(side)
    y = simulate_measurements(A, x_star, spectra, seed, cfg.electronic_noise_sigma)
    return Problem(A, spectra, y, x_star, ct_constraint(cfg, x_star, side), np.zeros(x_star.size), side)


def gd_step_scale(A: SystemMatrix, spectra: WindowedSpectra) -> float:
    """Intensity-free MSE step unit 1 / (2 (sum_w I_w sum_j s mu)^2 lambda_max)."""
    return 1.0 / (2.0 * spectra.lipschitz_weight**2 * lambda_max(A))


def admm_rho_scale(spectra: WindowedSpectra) -> float:
    """Intensity-proportional ADMM penalty unit sum_w I_w sum_j s mu^2."""
    return spectra.curvature_weight


@dataclass(frozen=True)
class CellSpec:
    label: str
    setting: float
    solver: str
    seed: int

    @property
    def name(self) -> str:
        return f"{self.label}-{self.setting:g}_{self.solver}_seed-{self.seed}"


@dataclass
class CellResult:
    name: str
    label: str
    setting: float
    solver: str
    seed: int
    status: str
    rmse: float | None = None
    rmse_hu: float | None = None
    iterations: int = 0
    converged: bool = False
    wall_ms: float = 0.0
    step_size: float | None = None
    error: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)
    image: Image | None = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        out = dict(self.__dict__)
        out.pop("image")
        return out


def _solver_config(
    cfg: ExperimentConfig, step: float | StepRule, *, rho: float | None = None, cg_iters: int = 20
) -> SolverConfig:
    return SolverConfig(
        step_size=step,
        max_iters=cfg.max_iters,
        convergence_tol=cfg.convergence_tol,
        rho=rho,
        cg_iters=cg_iters,
        record_wall_time=cfg.record_wall_time,
    )


def run_solver(
    solver: str,
    problem: Problem,
    cfg: ExperimentConfig,
    *,
    multiplier: float | None = None,
    exact_step: float | None = None,
) -> tuple[Image, SolverTrace]:
    defaults = solver_defaults()
    A, spectra, y, X, x1 = problem.A, problem.spectra, problem.y, problem.X, problem.x1
    if solver == "exact":
        step: float | StepRule = cast(StepRule, defaults["exact"]["step_size"])
        if exact_step is not None:
            step = exact_step
        return exact_solve(A, spectra, y, X, _solver_config(cfg, step), x1, x_star=problem.x_star)
    if solver == "mse_gd":
        m = multiplier if multiplier is not None else float(defaults["mse_gd"]["step_multiplier"])
        sc = _solver_config(cfg, m * gd_step_scale(A, spectra))
        return mse_gd_solve(A, spectra, y, X, sc, x1, x_star=problem.x_star)
    if solver == "polyak_sgm":
        if problem.x_star is None:
            raise ConfigError("polyak_sgm needs the true image for its oracle loss")
        oracle = l1_loss(A, spectra, y, problem.x_star)
        m = float(defaults["polyak_sgm"]["fallback_multiplier"])
        sc = _solver_config(cfg, m * step_size_rule("general", A, spectra, A.n_rows, A.n_cols))
        return polyak_sgm_solve(A, spectra, y, X, sc, x1, oracle, x_star=problem.x_star)
    if solver == "admm":
        m = multiplier if multiplier is not None else float(defaults["admm"]["rho_multiplier"])
        sc = _solver_config(cfg, "general", rho=m * admm_rho_scale(spectra), cg_iters=int(defaults["admm"]["cg_iters"]))
        return admm_poisson_solve(A, spectra, y, X, sc, x1, x_star=problem.x_star)
    raise ConfigError(f"unknown solver {solver!r}")


def _hu_rmse(cfg: ExperimentConfig, value: float | None) -> float | None:
    if cfg.hu_map is None or value is None:
        return None
    return abs(float(cfg.hu_map["slope"])) * value


def run_cell(
    spec: CellSpec,
    problem: Problem,
    cfg: ExperimentConfig,
    cell_dir: Path,
    *,
    multiplier: float | None = None,
    exact_step: float | None = None,
) -> CellResult:
    """Run one cell and write ``<cell>.trace.csv`` and ``<cell>.result.json``. Solver failures are recorded."""
    with cell_context(scenario=cfg.scenario, cell=spec.name, solver=spec.solver, seed=spec.seed):
        return _run_cell(spec, problem, cfg, cell_dir, multiplier=multiplier, exact_step=exact_step)


def _run_cell(
    spec: CellSpec,
    problem: Problem,
    cfg: ExperimentConfig,
    cell_dir: Path,
    *,
    multiplier: float | None,
    exact_step: float | None,
) -> CellResult:
    result = CellResult(spec.name, spec.label, spec.setting, spec.solver, spec.seed, status="ok")
    trace: SolverTrace | None = None
    try:
        x_hat, trace = run_solver(spec.solver, problem, cfg, multiplier=multiplier, exact_step=exact_step)
    except SolverDivergenceError as exc:
        result.status, result.error = "diverged", str(exc)
    except SolverStallError as exc:
        result.status, result.error = "stalled", str(exc)
    except ProjectionNotConvergedError as exc:
        result.status, result.error = "projection_failed", str(exc)
    if trace is not None:
        if problem.x_star is not None:
            result.rmse = rmse(x_hat, problem.x_star)
            result.rmse_hu = _hu_rmse(cfg, result.rmse)
        result.iterations = trace.iterations
        result.converged = trace.converged
        result.wall_ms = trace.records[-1].wall_ms if trace.records else 0.0
        result.step_size = trace.step_size
        result.image = x_hat
        if not trace.converged:
            result.status = "not_converged"
        write_trace_csv(cell_dir / f"{spec.name}.trace.csv", trace)
        if cfg.write_images and problem.grid_side is not None:
            write_pgm(cell_dir / f"{spec.name}.pgm", x_hat, problem.grid_side)
            write_image_csv(cell_dir / f"{spec.name}.image.csv", x_hat)
    else:
        logger.warning("Cell failed: %s", result.error)
        write_trace_csv(cell_dir / f"{spec.name}.trace.csv", SolverTrace(spec.solver, 0.0))
    if multiplier is not None:
        result.extra["multiplier"] = multiplier
    write_json(cell_dir / f"{spec.name}.result.json", result.to_dict())
    logger.info("Cell done: status=%s rmse=%s iterations=%d", result.status, result.rmse, result.iterations)
    return result


def _run_cells(jobs: list[tuple[CellSpec, Callable[[], CellResult]]], workers: int) -> list[CellResult]:
    """Run cell jobs in a worker pool; results come back in job order."""
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(lambda job: job[1](), jobs))
    return [job() for _, job in jobs]


def tune_multiplier(solver: str, problem: Problem, cfg: ExperimentConfig, grid: Iterable[float]) -> float | None:
    """Best multiplier (lowest RMSE) from the grid on one problem; None when every candidate fails."""
    if problem.x_star is None:
        raise ConfigError("tuning needs the true image")
    best: tuple[float, float] | None = None
    for m in grid:
        try:
            x_hat, _ = run_solver(solver, problem, cfg, multiplier=float(m))
        except (SolverDivergenceError, SolverStallError, ProjectionNotConvergedError) as exc:
            logger.info("Tuning %s: multiplier %g failed (%s)", solver, m, exc)
            continue
        err = rmse(x_hat, problem.x_star)
        if math.isfinite(err) and (best is None or err < best[1]):
            best = (float(m), err)
    return None if best is None else best[0]


def _tuned_multipliers(cfg: ExperimentConfig, problem: Problem) -> dict[str, float]:
    if not cfg.tune_baselines:
        return {}
    defaults = solver_defaults()
    out: dict[str, float] = {}
    for solver in ("mse_gd", "admm"):
        if solver not in cfg.solvers:
            continue
        chosen = tune_multiplier(solver, problem, cfg, defaults[solver]["grid"])
        if chosen is not None:
            out[solver] = chosen
    return out


def read_cell_results(cell_dir: Path) -> list[dict[str, Any]]:
    rows = []
    for path in sorted(cell_dir.glob("*.result.json")):
        rows.append(json.loads(path.read_text(encoding="utf-8")))
    return rows


def summarize(cell_dir: Path, summary_path: Path, *, hu: bool = False) -> list[dict[str, Any]]:
    """Recompute mean and population std per (setting, solver) from the per-cell result files only."""
    groups: dict[tuple[float, str], list[dict[str, Any]]] = {}
    for row in read_cell_results(cell_dir):
        groups.setdefault((float(row["setting"]), str(row["solver"])), []).append(row)
    summary: list[dict[str, Any]] = []
    for (setting, solver), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], SOLVER_NAMES.index(kv[0][1]))):
        ok = [r for r in rows if r["rmse"] is not None]
        rmses = np.array([r["rmse"] for r in ok], dtype=np.float64)
        entry: dict[str, Any] = {
            "setting": f"{setting:g}",
            "solver": solver,
            "n_runs": len(rows),
            "n_failed": len(rows) - len(ok),
            "rmse_mean": repr(float(rmses.mean())) if ok else "",
            "rmse_std": repr(float(rmses.std())) if ok else "",
            "iterations_mean": repr(float(np.mean([r["iterations"] for r in ok]))) if ok else "",
            "wall_ms_mean": repr(float(np.mean([r["wall_ms"] for r in ok]))) if ok else "",
        }
        if hu:
            hus = [r["rmse_hu"] for r in ok if r.get("rmse_hu") is not None]
            entry["rmse_hu_mean"] = repr(float(np.mean(hus))) if hus else ""
        summary.append(entry)
    fields = SUMMARY_FIELDS + (["rmse_hu_mean"] if hu else [])
    write_json_or_csv(summary_path, summary, fields)
    return summary


def write_gnuplot_script(path: Path, summary_csv: str, xlabel: str, *, logx: bool = False) -> Path:
    """Companion plot script (RMSE vs setting, one line per solver); written, never executed."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{xlabel}'",
        "set ylabel 'RMSE'",
        "set logscale y",
    ]
    if logx:
        lines.append("set logscale x")
    plots = [
        f"'{summary_csv}' using (strcol(2) eq '{s}' ? $1 : 1/0):5:6 with yerrorlines title '{s}'" for s in SOLVER_NAMES
    ]
    lines.append("plot " + ", \\\n     ".join(plots))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _mean_rmse(summary: list[dict[str, Any]], solver: str) -> dict[str, float]:
    return {r["setting"]: float(r["rmse_mean"]) for r in summary if r["solver"] == solver and r["rmse_mean"] != ""}


def _run_ct_sweep(
    cfg: ExperimentConfig,
    label: str,
    settings: list[tuple[float, SystemMatrix, WindowedSpectra]],
    *,
    exact_steps: dict[float, float] | None = None,
) -> dict[str, Any]:
    out = Path(cfg.out_dir)
    cell_dir = out / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    jobs: list[tuple[CellSpec, Callable[[], CellResult]]] = []
    tuning: dict[str, dict[str, float]] = {}
    for setting, A, spectra in settings:
        problems = {seed: simulate_ct_problem(cfg, A, spectra, seed) for seed in cfg.seeds}
        tuned = _tuned_multipliers(cfg, problems[cfg.seeds[0]])
        if tuned:
            tuning[f"{setting:g}"] = tuned
        for solver in cfg.solvers:
            for seed in cfg.seeds:
                spec = CellSpec(label, setting, solver, seed)
                step = exact_steps.get(setting) if exact_steps is not None and solver == "exact" else None
                job = partial(
                    run_cell, spec, problems[seed], cfg, cell_dir, multiplier=tuned.get(solver), exact_step=step
                )
                jobs.append((spec, job))
    results = _run_cells(jobs, cfg.workers)
    summary_path = out / "summary.csv"
    summary = summarize(cell_dir, summary_path, hu=cfg.hu_map is not None)
    write_gnuplot_script(out / "plot.gp", summary_path.name, label, logx=label == "intensity")
    report: dict[str, Any] = {
        "scenario": cfg.scenario,
        "settings": [s for s, _, _ in settings],
        "solvers": list(cfg.solvers),
        "seeds": list(cfg.seeds),
        "tuning": tuning,
        "cells": [r.name for r in results],
        "failures": [r.name for r in results if r.status in ("diverged", "stalled", "projection_failed")],
        "summary": summary,
    }
    return report


def run_ct_views_sweep(cfg: ExperimentConfig) -> dict[str, Any]:
    """Views in ``cfg.views`` at intensity ``cfg.intensity``; every configured solver and seed."""
    spectra = base_spectra(cfg)
    settings = [(float(v), ct_matrix(cfg, v), spectra) for v in cfg.views]
    report = _run_ct_sweep(cfg, "views", settings)
    lowest, highest = f"{min(cfg.views):g}", f"{max(cfg.views):g}"
    ratios: dict[str, float | None] = {}
    for solver in cfg.solvers:
        means = _mean_rmse(report["summary"], solver)
        if lowest in means and highest in means and means[highest] > 0.0:
            ratios[solver] = means[lowest] / means[highest]
        else:
            ratios[solver] = None
    report["rmse_ratio_fewest_to_most_views"] = ratios
    write_json(Path(cfg.out_dir) / "sweep.json", report)
    return report


def run_ct_intensity_sweep(cfg: ExperimentConfig) -> dict[str, Any]:
    """
    Intensities in ``cfg.intensities`` at ``cfg.intensity_sweep_views`` views. The EXACT step is the
    step at the reference intensity scaled by reference / intensity.
    """
    defaults = solver_defaults()
    reference = float(defaults["exact"]["reference_intensity"])
    A = ct_matrix(cfg, cfg.intensity_sweep_views)
    rule = cast(StepRule, defaults["exact"]["step_size"])
    base_step = step_size_rule(rule, A, base_spectra(cfg, reference), A.n_rows, A.n_cols)
    settings = [(float(i), A, base_spectra(cfg, float(i))) for i in cfg.intensities]
    steps = {float(i): scaled_exact_step(base_step, float(i), reference_intensity=reference) for i in cfg.intensities}
    report = _run_ct_sweep(cfg, "intensity", settings, exact_steps=steps)
    report["exact_steps"] = {f"{k:g}": v for k, v in steps.items()}
    if "exact" in cfg.solvers:
        means = _mean_rmse(report["summary"], "exact")
        ordered = [means[f"{float(i):g}"] for i in sorted(cfg.intensities) if f"{float(i):g}" in means]
        report["exact_rmse_nonincreasing_in_intensity"] = all(b <= a for a, b in zip(ordered, ordered[1:]))
    write_json(Path(cfg.out_dir) / "sweep.json", report)
    return report


def gaussian_problem(cfg: ExperimentConfig, n: int, seed: int) -> Problem:
    """Noiseless monochromatic (W=1, I=1, mu=1) Gaussian-design problem with ||x*|| = cfg.x_star_norm."""
    d = cfg.dimension
    direction = make_rng(seed, "x_star").standard_normal(d)
    x_star = cfg.x_star_norm * direction / np.linalg.norm(direction)
    A = build_gaussian_matrix(n, d, seed)
    spectra = WindowedSpectra.single(Spectrum(np.array([1.0]), np.array([1.0]), 1.0))
    y = expected_counts(A, x_star, spectra)
    X = L2Ball(4.0 * cfg.x_star_norm, x_star)
    return Problem(A, spectra, y, x_star, X, np.zeros(d))


def run_gaussian_samples_sweep(cfg: ExperimentConfig) -> dict[str, Any]:
    """Iterations for EXACT (fixed step, no averaging) to reach ||x_t - x*|| <= cfg.gaussian_tol per n."""
    out = Path(cfg.out_dir)
    cell_dir = out / "cells"
    rows: list[dict[str, Any]] = []
    monotone: dict[str, bool] = {}
    unconverged: list[str] = []
    solver_cfg = SolverConfig(
        step_size=cfg.gaussian_step,
        max_iters=cfg.gaussian_max_iters,
        averaging=False,
        truth_tol=cfg.gaussian_tol,
        record_wall_time=cfg.record_wall_time,
        log_every=1000,
    )
    for seed in cfg.seeds:
        counts: list[int] = []
        for m in cfg.sample_multipliers:
            n = int(m) * cfg.dimension
            problem = gaussian_problem(cfg, n, seed)
            spec = CellSpec("n", float(n), "exact", seed)
            with cell_context(scenario=cfg.scenario, cell=spec.name, solver="exact", seed=seed):
                _, trace = exact_solve(
                    problem.A, problem.spectra, problem.y, problem.X, solver_cfg, problem.x1, x_star=problem.x_star
                )
                if not trace.converged:
                    unconverged.append(spec.name)
                    logger.warning("Did not reach %g within %d iterations", cfg.gaussian_tol, cfg.gaussian_max_iters)
            write_trace_csv(cell_dir / f"{spec.name}.trace.csv", trace)
            dists = trace.distances()
            counts.append(trace.iterations)
            rows.append(
                {
                    "seed": seed,
                    "n": n,
                    "multiplier": m,
                    "iterations": trace.iterations,
                    "converged": trace.converged,
                    "final_dist": repr(dists[-1]) if dists else "",
                }
            )
        monotone[str(seed)] = all(b <= a for a, b in zip(counts, counts[1:]))
    write_json_or_csv(out / "gaussian_samples.csv", rows, SAMPLES_FIELDS)
    failed = [f"iterations_nonincreasing_in_n[seed {s}]" for s, ok in monotone.items() if not ok]
    failed += [f"converged[{name}]" for name in unconverged]
    report = {
        "scenario": cfg.scenario,
        "dimension": cfg.dimension,
        "sample_sizes": [int(m) * cfg.dimension for m in cfg.sample_multipliers],
        "iterations_nonincreasing_in_n": monotone,
        "not_converged": unconverged,
        "failed_checks": failed,
        "rows": rows,
    }
    report_path = write_json(out / "sweep.json", report)
    if failed:
        raise SweepCheckError(cfg.scenario, failed, str(report_path))
    return report


def contrast_problem(
    cfg: ExperimentConfig, seed: int, *, background_scale: float | None = None
) -> tuple[Problem, list[CircularRegion]]:
    """Known water/bone background folded into per-ray spectra; iodine is the unknown."""
    side = cfg.contrast_grid_side
    A = ct_matrix(cfg, cfg.n_views, side)
    spectra = base_spectra(cfg, cfg.contrast_intensity)
    first = spectra.windows[0]
    if not isinstance(first, Spectrum):
        raise ConfigError("contrast recovery needs shared-weight spectra")
    scale = cfg.background_scale if background_scale is None else background_scale
    scenario = make_contrast_scenario(side, A, first, background_scale=scale)
    windows: list[Window] = []
    for window in spectra.windows:
        if not isinstance(window, Spectrum):
            raise ConfigError("contrast recovery needs shared-weight spectra")
        # zero background: the plain spectrum
        windows.append(window if not np.any(scenario.exponents) else reparameterize_rays(window, scenario.exponents))
    effective = WindowedSpectra(tuple(windows))
    y = simulate_measurements(A, scenario.unknown, effective, seed, cfg.electronic_noise_sigma)
    X = ct_constraint(cfg, scenario.unknown, side)
    problem = Problem(A, effective, y, scenario.unknown, X, np.zeros(scenario.unknown.size), side)
    return problem, list(scenario.regions)


def run_contrast_recovery(cfg: ExperimentConfig) -> dict[str, Any]:
    """EXACT on the iodine-only unknown; reports per-ROI mean recovered concentration against truth."""
    out = Path(cfg.out_dir)
    cell_dir = out / "cells"
    rows: list[dict[str, Any]] = []
    ranks: dict[str, bool] = {}
    for seed in cfg.seeds:
        problem, regions = contrast_problem(cfg, seed)
        spec = CellSpec("contrast", cfg.contrast_intensity, "exact", seed)
        result = run_cell(spec, problem, cfg, cell_dir)
        if result.image is None:
            continue
        x_hat = result.image
        means = region_means(x_hat, regions, cfg.contrast_grid_side)
        for k, (region, recovered) in enumerate(zip(regions, means, strict=True)):
            rows.append(
                {
                    "seed": seed,
                    "roi": k,
                    "truth": repr(region.value),
                    "recovered": repr(recovered),
                    "relative_error": repr(abs(recovered - region.value) / region.value),
                }
            )
        order = np.argsort([r.value for r in regions])
        ranks[str(seed)] = bool(np.all(np.diff(np.asarray(means)[order]) > 0.0))
    write_json_or_csv(out / "contrast.csv", rows, CONTRAST_FIELDS)
    report = {"scenario": cfg.scenario, "roi_rank_order_preserved": ranks, "rows": rows}
    write_json(out / "sweep.json", report)
    return report


def run_theory_report(cfg: ExperimentConfig) -> dict[str, Any]:
    """Theory quantities for the CT problem at ``cfg.n_views`` views and the first seed."""
    spectra = base_spectra(cfg)
    A = ct_matrix(cfg, cfg.n_views)
    seed = cfg.seeds[0]
    problem = simulate_ct_problem(cfg, A, spectra, seed)
    assert problem.x_star is not None
    report = build_theory_report(
        A, spectra, problem.y, problem.x_star, problem.X, problem.x1, n_samples=cfg.theory_samples, seed=seed
    ).to_dict()
    write_json(Path(cfg.out_dir) / "theory.json", report)
    return report


SCENARIO_RUNNERS: dict[str, Callable[[ExperimentConfig], dict[str, Any]]] = {
    "ct_views_sweep": run_ct_views_sweep,
    "ct_intensity_sweep": run_ct_intensity_sweep,
    "gaussian_samples_sweep": run_gaussian_samples_sweep,
    "contrast_recovery": run_contrast_recovery,
    "theory_report": run_theory_report,
}


def run_experiment(cfg: ExperimentConfig) -> dict[str, Any]:
    logger.info("Running %s into %s (%d seeds, %d workers)", cfg.scenario, cfg.out_dir, len(cfg.seeds), cfg.workers)
    return SCENARIO_RUNNERS[cfg.scenario](cfg)
