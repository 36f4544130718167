"""
EXACT projected extragradient and the three baselines (projected MSE gradient descent, Polyak
subgradient on the l1 loss, scaled-form ADMM on the Poisson likelihood).

Every solver shares the stopping rule: the average of iterates ceil(t/2)..t moves by at most
``convergence_tol``. Iterate 1 is the (projected) starting point.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal, TypeAlias

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .constraints import ConstraintSet
from .errors import ConfigError, SolverDivergenceError, SolverStallError
from .geometry import SystemMatrix
from .model import FloatArray, Image, MeasurementSet, WindowedSpectra
from .problem import (
    check_dimensions,
    l1_loss,
    l1_subgradient,
    mse_gradient,
    mse_loss,
    operator_F,
    poisson_nll,
    rmse,
)
from .theory import lambda_max, lipschitz_bound

logger = logging.getLogger(__name__)

StepRule: TypeAlias = Literal["general", "positive_meas", "gaussian"]
STEP_RULES: frozenset[str] = frozenset({"general", "positive_meas", "gaussian"})

DIVERGENCE_FACTOR = 1e6
_AVERAGER_RESYNC = 256
# Tikhonov shift that keeps the ADMM normal operator positive definite when A^T A is singular
ADMM_RIDGE = 1e-8


@dataclass(frozen=True)
class SolverConfig:
    step_size: float | StepRule = "general"
    max_iters: int = 5000
    convergence_tol: float = 1e-5
    averaging: bool = True
    seed: int = 0
    # stop once ||x_t - x*|| falls below this (needs the truth); None uses the averaged-iterate rule only
    truth_tol: float | None = None
    rho: float | None = None
    cg_iters: int = 20
    fallback_step: float | None = None
    record_wall_time: bool = True
    log_every: int = 100

    def __post_init__(self) -> None:
        if isinstance(self.step_size, str):
            if self.step_size not in STEP_RULES:
                raise ConfigError(f"step_size must be a positive number or one of {sorted(STEP_RULES)}")
        elif not (math.isfinite(self.step_size) and self.step_size > 0.0):
            raise ConfigError(f"step_size must be > 0, got {self.step_size!r}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters!r}")
        if not self.convergence_tol > 0.0:
            raise ConfigError(f"convergence_tol must be > 0, got {self.convergence_tol!r}")
        if self.truth_tol is not None and not self.truth_tol > 0.0:
            raise ConfigError("truth_tol must be > 0")
        if self.rho is not None and not self.rho > 0.0:
            raise ConfigError(f"rho must be > 0, got {self.rho!r}")
        if self.cg_iters < 1:
            raise ConfigError("cg_iters must be >= 1")
        if self.fallback_step is not None and not self.fallback_step > 0.0:
            raise ConfigError("fallback_step must be > 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    dist_to_truth: float | None
    avg_movement: float | None
    loss: float
    wall_ms: float
    primal_residual: float | None = None


@dataclass
class SolverTrace:
    solver: str
    step_size: float
    records: list[TraceRecord] = field(default_factory=list)
    converged: bool = False
    final_rmse: float | None = None

    @property
    def iterations(self) -> int:
        return self.records[-1].iteration if self.records else 0

    def distances(self) -> list[float]:
        return [r.dist_to_truth for r in self.records if r.dist_to_truth is not None]


class IterateAverager:
    """Running mean of iterates ceil(t/2)..t: one is dropped whenever t becomes odd (t >= 3)."""

    def __init__(self) -> None:
        self._window: deque[FloatArray] = deque()
        self._sum: FloatArray | None = None
        self.t = 0

    def push(self, x: FloatArray) -> FloatArray:
        self.t += 1
        x = np.array(x, dtype=np.float64, copy=True)
        self._window.append(x)
        self._sum = x.copy() if self._sum is None else self._sum + x
        if self.t >= 3 and self.t % 2 == 1:
            self._sum -= self._window.popleft()
        if self.t % _AVERAGER_RESYNC == 0:
            self._sum = np.sum(np.stack(self._window), axis=0)
        return self.mean()

    def mean(self) -> FloatArray:
        if self._sum is None:
            raise ValueError("no iterates pushed yet")
        return self._sum / len(self._window)


def averaged_iterate(history: Sequence[Image]) -> Image:
    t = len(history)
    if t < 1:
        raise ValueError("history must hold at least one iterate")
    start = math.ceil(t / 2) - 1
    return np.mean(np.stack([np.asarray(h, dtype=np.float64) for h in history[start:]]), axis=0)


def step_size_rule(rule: StepRule, A: SystemMatrix, spectra: WindowedSpectra, n: int, d: int) -> float:
    """
    general: 1 / (4 L) with L = lambda_max(A^T diag(c) A / n), c_i the per-ray slope bound.
    positive_meas: 1 / (4 lambda_max(Sigma) sum_w I_w sum_j s_wj mu_wj), using the largest ray weight.
    gaussian: ((n + d) / n) / (40 sum_w I_w sum_j s_wj mu_wj).

    general and positive_meas agree when every ray shares its spectrum; with per-ray spectra the
    general step is the larger one.
    """
    if rule == "general":
        return 1.0 / (4.0 * lipschitz_bound(A, spectra))
    if rule == "positive_meas":
        return 1.0 / (4.0 * lambda_max(A) * spectra.lipschitz_weight)
    if rule == "gaussian":
        return ((n + d) / n) / (40.0 * spectra.lipschitz_weight)
    raise ConfigError(f"unknown step rule {rule!r}")


def scaled_exact_step(base_step: float, intensity: float, *, reference_intensity: float = 1e6) -> float:
    """Step for intensity I from the step tuned at the reference intensity: base * reference / I."""
    if not intensity > 0.0:
        raise ConfigError("intensity must be > 0")
    return base_step * reference_intensity / intensity


def resolve_step(cfg: SolverConfig, A: SystemMatrix, spectra: WindowedSpectra) -> float:
    if isinstance(cfg.step_size, str):
        return step_size_rule(cfg.step_size, A, spectra, A.n_rows, A.n_cols)
    return float(cfg.step_size)


class _Recorder:
    """Shared trace bookkeeping: averaging, divergence guard, stopping and timing."""

    def __init__(self, solver: str, cfg: SolverConfig, step: float, x_star: Image | None) -> None:
        self.solver = solver
        self.cfg = cfg
        self.x_star = x_star
        self.trace = SolverTrace(solver=solver, step_size=step)
        self.averager = IterateAverager()
        self.avg: FloatArray | None = None
        self.last: FloatArray | None = None
        self.limit = math.inf
        self.done = False
        self._t0 = time.perf_counter()

    def _wall_ms(self) -> float:
        if not self.cfg.record_wall_time:
            return 0.0
        return 1000.0 * (time.perf_counter() - self._t0)

    def _dist(self, x: FloatArray) -> float | None:
        if self.x_star is None:
            return None
        return float(np.linalg.norm(x - self.x_star))

    def start(self, x: FloatArray, loss: float, *, primal_residual: float | None = None) -> None:
        if not np.all(np.isfinite(x)):
            raise SolverDivergenceError(self.solver, 1, "starting point is not finite")
        self.limit = DIVERGENCE_FACTOR * max(float(np.linalg.norm(x)), 1.0)
        logger.info("%s: start (step %.4g, max_iters %d)", self.solver, self.trace.step_size, self.cfg.max_iters)
        self.avg = self.averager.push(x)
        self.last = x
        self.trace.records.append(TraceRecord(1, self._dist(x), None, loss, self._wall_ms(), primal_residual))
        self._check_truth(x)
        if self.cfg.max_iters <= 1:
            self.done = True

    @property
    def t(self) -> int:
        return self.averager.t

    def keep_going(self) -> bool:
        return not self.done

    def guard(self, x: FloatArray) -> None:
        """Raise on a non-finite or runaway iterate (called for every new point, t+1/2 included)."""
        if not np.all(np.isfinite(x)):
            raise SolverDivergenceError(self.solver, self.t + 1, "iterate is not finite")
        norm = float(np.linalg.norm(x))
        if norm > self.limit:
            raise SolverDivergenceError(self.solver, self.t + 1, f"iterate norm {norm:.3e} exceeds {self.limit:.3e}")

    def record(self, x: FloatArray, loss: float, *, primal_residual: float | None = None) -> None:
        self.guard(x)
        assert self.avg is not None
        previous = self.avg
        self.avg = self.averager.push(x)
        self.last = x
        movement = float(np.linalg.norm(self.avg - previous))
        t = self.t
        rec = TraceRecord(t, self._dist(x), movement, loss, self._wall_ms(), primal_residual)
        self.trace.records.append(rec)
        if t % self.cfg.log_every == 0:
            logger.debug("%s: iter %d loss %.6g movement %.3e", self.solver, t, loss, movement)
        if self.cfg.truth_tol is None and movement <= self.cfg.convergence_tol:
            self.trace.converged = True
            self.done = True
        self._check_truth(x)
        if t >= self.cfg.max_iters:
            self.done = True

    def _check_truth(self, x: FloatArray) -> None:
        if self.cfg.truth_tol is None or self.x_star is None:
            return
        dist = self._dist(x)
        if dist is not None and dist <= self.cfg.truth_tol:
            self.trace.converged = True
            self.done = True

    def finish(self) -> tuple[Image, SolverTrace]:
        assert self.avg is not None and self.last is not None
        out = self.avg.copy() if self.cfg.averaging else self.last.copy()
        if self.x_star is not None:
            self.trace.final_rmse = rmse(out, self.x_star)
        logger.info(
            "%s: stop after %d iterations (converged=%s%s)",
            self.solver,
            self.t,
            self.trace.converged,
            "" if self.trace.final_rmse is None else f", rmse={self.trace.final_rmse:.6g}",
        )
        return out, self.trace


def _prepare(
    A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, X: ConstraintSet, x1: Image
) -> FloatArray:
    x = np.asarray(x1, dtype=np.float64)
    check_dimensions(A, spectra, y, x)
    return X.project(x)


def exact_solve(
    A: SystemMatrix,
    spectra: WindowedSpectra,
    y: MeasurementSet,
    X: ConstraintSet,
    cfg: SolverConfig,
    x1: Image,
    *,
    x_star: Image | None = None,
) -> tuple[Image, SolverTrace]:
    """
    Projected extragradient: x_{t+1/2} = P(x_t - g F(x_t)), x_{t+1} = P(x_t - g F(x_{t+1/2})).
    The trace loss is ||F(x_t)||.
    """
    gamma = resolve_step(cfg, A, spectra)
    rec = _Recorder("exact", cfg, gamma, x_star)
    x = _prepare(A, spectra, y, X, x1)
    fx = operator_F(A, spectra, y, x)
    rec.start(x, float(np.linalg.norm(fx)))
    while rec.keep_going():
        x_half = X.project(x - gamma * fx)
        rec.guard(x_half)
        x = X.project(x - gamma * operator_F(A, spectra, y, x_half))
        fx = operator_F(A, spectra, y, x)
        rec.record(x, float(np.linalg.norm(fx)))
    return rec.finish()


def mse_gd_solve(
    A: SystemMatrix,
    spectra: WindowedSpectra,
    y: MeasurementSet,
    X: ConstraintSet,
    cfg: SolverConfig,
    x1: Image,
    *,
    x_star: Image | None = None,
) -> tuple[Image, SolverTrace]:
    step = resolve_step(cfg, A, spectra)
    rec = _Recorder("mse_gd", cfg, step, x_star)
    x = _prepare(A, spectra, y, X, x1)
    rec.start(x, mse_loss(A, spectra, y, x))
    while rec.keep_going():
        x = X.project(x - step * mse_gradient(A, spectra, y, x))
        rec.record(x, mse_loss(A, spectra, y, x))
    return rec.finish()


def polyak_step(loss: float, oracle: float, grad_norm_sq: float) -> float:
    """(loss - oracle) / ||g||^2 when the loss is above the oracle, else 0."""
    gap = loss - oracle
    if gap <= 0.0 or grad_norm_sq <= 0.0:
        return 0.0
    return gap / grad_norm_sq


def polyak_sgm_solve(
    A: SystemMatrix,
    spectra: WindowedSpectra,
    y: MeasurementSet,
    X: ConstraintSet,
    cfg: SolverConfig,
    x1: Image,
    oracle_loss: float,
    *,
    x_star: Image | None = None,
) -> tuple[Image, SolverTrace]:
    """
    Projected subgradient on the l1 loss with the Polyak step. When the loss dips below the
    oracle the step falls back to c / t, c being the first Polyak step taken.
    """
    x = _prepare(A, spectra, y, X, x1)
    loss = l1_loss(A, spectra, y, x)
    fallback_c = cfg.fallback_step
    rec = _Recorder("polyak_sgm", cfg, 0.0, x_star)
    rec.start(x, loss)
    while rec.keep_going():
        g = l1_subgradient(A, spectra, y, x)
        g_sq = float(g @ g)
        if loss > oracle_loss:
            if g_sq == 0.0:
                raise SolverStallError("polyak_sgm", rec.t, "zero subgradient while the loss is above the oracle")
            step = polyak_step(loss, oracle_loss, g_sq)
            if fallback_c is None:
                fallback_c = step
                rec.trace.step_size = step
        elif loss < oracle_loss:
            c = fallback_c if fallback_c is not None else _default_fallback(cfg, A, spectra)
            step = c / rec.t
        else:
            step = 0.0
        x = X.project(x - step * g)
        loss = l1_loss(A, spectra, y, x)
        rec.record(x, loss)
    return rec.finish()


def _default_fallback(cfg: SolverConfig, A: SystemMatrix, spectra: WindowedSpectra) -> float:
    return resolve_step(cfg, A, spectra)


def admm_z_update(
    v: FloatArray,
    counts: FloatArray,
    spectra: WindowedSpectra,
    rho: float,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> FloatArray:
    """
    Per-ray minimiser of Loss_i(z) + (rho / 2)(z - v_i)^2 with
    Loss_i(z) = sum_w I_w H_w(z) - y_wi log(I_w H_w(z)), H_w(z) = sum_j s_wj exp(-mu_wj z) (no clamping).

    Safeguarded Newton on the derivative inside an expanding bracket; a step leaving the
    bracket, or a non-positive curvature, is replaced by bisection. ``counts`` is (W, n).
    """
    v = np.asarray(v, dtype=np.float64)
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    n = v.size
    intensities = [w.intensities(n) for w in spectra.windows]

    def derivs(z: FloatArray) -> tuple[FloatArray, FloatArray]:
        g = rho * (z - v)
        h = np.full(n, rho)
        with np.errstate(over="ignore", invalid="ignore"):
            for window, inten, y in zip(spectra.windows, intensities, counts, strict=True):
                log_h, m1, m2 = window.tilted_moments(z)
                mean = inten * np.exp(log_h)
                g = g + m1 * (y - mean)
                h = h + mean * m2 - y * (m2 - m1 * m1)
        return g, h

    width = np.ones(n)
    lo, hi = v - width, v + width
    for _ in range(200):
        g_lo, _ = derivs(lo)
        g_hi, _ = derivs(hi)
        bad_lo = ~(g_lo < 0.0)
        bad_hi = ~(g_hi > 0.0)
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = np.where(bad_lo | bad_hi, 2.0 * width, width)
        lo = np.where(bad_lo, v - width, lo)
        hi = np.where(bad_hi, v + width, hi)
    z = np.clip(v, lo, hi)
    for _ in range(max_iter):
        g, h = derivs(z)
        lo = np.where(g < 0.0, z, lo)
        hi = np.where(g > 0.0, z, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = z - g / h
        ok = (h > 0.0) & np.isfinite(newton) & (newton > lo) & (newton < hi)
        z_next = np.where(ok, newton, 0.5 * (lo + hi))
        z_next = np.where(g == 0.0, z, z_next)
        settled = np.abs(z_next - z) <= tol * (1.0 + np.abs(z))
        z = z_next
        if settled.all():
            break
    else:
        logger.debug("admm z-update: %d rays hit the iteration cap", int((~settled).sum()))
    return z


def admm_x_update(A: SystemMatrix, target: FloatArray, x0: Image, X: ConstraintSet, *, cg_iters: int) -> Image:
    """
    Inexact x-step: ``cg_iters`` conjugate-gradient steps on (A^T A + 1e-8 I) x = A^T target from x0,
    then projection onto X.
    """
    d = A.n_cols

    def normal_matvec(v: FloatArray) -> FloatArray:
        flat = np.ravel(v)
        return A.rdot(A.dot(flat)) + ADMM_RIDGE * flat

    normal = LinearOperator((d, d), matvec=normal_matvec, dtype=np.float64)
    sol, _ = cg(normal, A.rdot(target), x0=x0, rtol=1e-10, maxiter=cg_iters)
    return X.project(np.asarray(sol, dtype=np.float64))


def admm_poisson_solve(
    A: SystemMatrix,
    spectra: WindowedSpectra,
    y: MeasurementSet,
    X: ConstraintSet,
    cfg: SolverConfig,
    x1: Image,
    *,
    x_star: Image | None = None,
) -> tuple[Image, SolverTrace]:
    """
    Scaled-form ADMM for min Poisson-NLL(z) s.t. Ax = z, x in X.

    The x-update runs ``cfg.cg_iters`` conjugate-gradient steps on (A^T A + 1e-8 I) x = A^T (z - u),
    warm-started at the previous x, then projects onto X.
    """
    if np.any(y.counts < 0.0):
        raise ValueError("ADMM Poisson solver needs nonnegative counts")
    rho = cfg.rho if cfg.rho is not None else 0.1 * spectra.curvature_weight
    x = _prepare(A, spectra, y, X, x1)
    counts = np.stack([y.window(k) for k in range(y.n_windows)])
    ax = A.dot(x)
    z = ax.copy()
    u = np.zeros_like(z)
    rec = _Recorder("admm", cfg, rho, x_star)
    rec.start(x, poisson_nll(A, spectra, y, x), primal_residual=0.0)
    while rec.keep_going():
        x = admm_x_update(A, z - u, x, X, cg_iters=cfg.cg_iters)
        ax = A.dot(x)
        z = admm_z_update(ax + u, counts, spectra, rho)
        u = u + ax - z
        rec.record(x, poisson_nll(A, spectra, y, x), primal_residual=float(np.linalg.norm(ax - z)))
    return rec.finish()


SolverFn = Callable[..., tuple[Image, SolverTrace]]
SOLVERS: dict[str, SolverFn] = {
    "exact": exact_solve,
    "mse_gd": mse_gd_solve,
    "polyak_sgm": polyak_sgm_solve,
    "admm": admm_poisson_solve,
}
