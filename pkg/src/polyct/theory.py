"""
Theoretical quantities: Lipschitz and eigenvalue bounds, the Gaussian width, the fixed point
gamma*, rho, kappa, the statistical error term and the linear-convergence envelope.

Monte Carlo estimates (restricted eigenvalue, nu, kappa) are labelled as estimates in reports:
sampling can only ever over-estimate an infimum.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Any

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import eigvalsh
from scipy.optimize import brentq
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh
from scipy.special import gammaln, ndtr

from .constraints import ConstraintSet, L2Ball
from .errors import DimensionMismatchError, EigenvalueError, SampleSizeError
from .geometry import SystemMatrix
from .model import FloatArray, Image, MeasurementSet, Spectrum, WindowedSpectra, expected_counts
from .problem import operator_F
from .rng import make_rng

logger = logging.getLogger(__name__)

_SQRT_2PI = math.sqrt(2.0 * math.pi)
# Outer expectation over G is truncated at 12 standard deviations; the dropped tail is below phi(12) ~ 1e-32.
G_MAX = 12.0
_PANELS = 96
_NODES = 24
DENSE_EIG_LIMIT = 2000


def lambda_max(A: SystemMatrix, *, weights: FloatArray | None = None, tol: float = 1e-8) -> float:
    """Largest eigenvalue of A^T diag(weights) A / n (weights default to ones, giving Sigma = A^T A / n)."""
    n, d = A.shape
    c = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if c.shape != (n,):
        raise DimensionMismatchError(f"lambda_max weights have shape {c.shape}, expected ({n},)")
    if d <= DENSE_EIG_LIMIT:
        dense = A.to_dense()
        gram = dense.T @ (c[:, None] * dense) / n
        return float(eigvalsh(gram, subset_by_index=[d - 1, d - 1])[0])

    def matvec(v: FloatArray) -> FloatArray:
        return A.rdot(c * A.dot(np.ravel(v))) / n

    op = LinearOperator((d, d), matvec=matvec, dtype=np.float64)
    try:
        vals = eigsh(op, k=1, which="LA", tol=tol, return_eigenvectors=False, v0=np.ones(d))
    except ArpackNoConvergence as exc:
        raise EigenvalueError(f"Lanczos iteration for lambda_max did not converge: {exc!s}") from exc
    return float(vals[0])


def lipschitz_bound(A: SystemMatrix, spectra: WindowedSpectra) -> float:
    """L = lambda_max(A^T diag(c) A / n) with c_i the per-ray slope bound summed over windows.

    For spectra shared by every ray this equals lambda_max(Sigma) * spectra.lipschitz_weight.
    """
    return lambda_max(A, weights=spectra.slope_bounds(A.n_rows))


def _standard_normal_pdf(t: FloatArray) -> FloatArray:
    return np.exp(-0.5 * t * t) / _SQRT_2PI


def inner_integral(g: FloatArray | float) -> FloatArray:
    """Integral of t^2 phi(t) over [-g/4, g/4], in closed form."""
    b = np.asarray(g, dtype=np.float64) / 4.0
    a = -b
    return (ndtr(b) - ndtr(a)) - (b * _standard_normal_pdf(b) - a * _standard_normal_pdf(a))


@lru_cache(maxsize=1)
def _outer_rule() -> tuple[FloatArray, FloatArray]:
    """Composite Gauss-Legendre nodes and weights on [0, G_MAX]."""
    x, w = leggauss(_NODES)
    edges = np.linspace(0.0, G_MAX, _PANELS + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    base = weights * inner_integral(nodes) * _standard_normal_pdf(nodes)
    return nodes, base


def _slope_at(spectrum: Spectrum, t: FloatArray) -> FloatArray:
    """|h'(t)| for t >= 0 (the t -> 0+ limit at zero)."""
    return np.exp(-np.multiply.outer(t, spectrum.attenuations)) @ (spectrum.weights * spectrum.attenuations)


def psi(gamma: float, spectrum: Spectrum, x_star_norm: float) -> float:
    """Left side of the gamma* fixed-point equation; strictly decreasing in gamma."""
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma!r}")
    nodes, base = _outer_rule()
    hp = _slope_at(spectrum, 6.0 * x_star_norm * nodes)
    ratio = (hp / (hp + gamma)) ** 2
    return float(np.sum(base * ratio))


def psi_zero() -> float:
    """psi(0), a universal constant (the ratio is identically 1)."""
    _, base = _outer_rule()
    return float(np.sum(base))


def gamma_star(spectrum: Spectrum, x_star_norm: float, omega_bar: float, n: int) -> float:
    """Unique root of psi(gamma) = 16 omega_bar^2 / n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    target = 16.0 * omega_bar**2 / n
    if psi_zero() <= target:
        raise SampleSizeError(
            f"sample size below fixed-point threshold: psi(0) = {psi_zero():.6g} <= 16 omega^2 / n = {target:.6g}"
        )
    if target == 0.0:
        raise SampleSizeError("omega_bar = 0 gives no finite fixed point")

    def residual(g: float) -> float:
        return psi(g, spectrum, x_star_norm) - target

    hi = spectrum.mean_attenuation
    for _ in range(400):
        if residual(hi) < 0.0:
            break
        hi *= 2.0
    else:
        raise SampleSizeError("could not bracket gamma*")
    root = brentq(residual, 0.0, hi, xtol=1e-15 * hi, rtol=1e-15, maxiter=500)
    return float(root)


def regime1_constant() -> float:
    """c0 = inner(1) * e^{-2} / sqrt(2 pi)."""
    return float(inner_integral(1.0)) * math.exp(-2.0) / _SQRT_2PI


def regime1_sample_threshold(omega_bar: float) -> float:
    """Above (64 / c0) omega_bar^2 samples, gamma* >= sum_j s_j mu_j exp(-12 mu_j ||x*||)."""
    return 64.0 / regime1_constant() * omega_bar**2


def regime1_lower_bound(spectrum: Spectrum, x_star_norm: float) -> float:
    return float(spectrum.weights @ (spectrum.attenuations * np.exp(-12.0 * spectrum.attenuations * x_star_norm)))


def regime2_base(spectrum: Spectrum, x_star_norm: float, omega_bar: float) -> float:
    """Sample-size scale (sum s mu)^2 / (sum s^2 mu^2) * max_j((mu_j ||x*||)^4 v 1) * omega_bar^2."""
    s, mu = spectrum.weights, spectrum.attenuations
    ratio = float((s @ mu) ** 2 / np.sum((s * mu) ** 2))
    growth = float(np.max(np.maximum((mu * x_star_norm) ** 4, 1.0)))
    return ratio * growth * omega_bar**2


def doubling_constant(
    spectrum: Spectrum,
    x_star_norm: float,
    omega_bar: float,
    *,
    start: float = 1.0,
    max_doublings: int = 80,
) -> tuple[float, int]:
    """
    Smallest C = start * 2^k such that n = ceil(C * regime2_base) gives gamma* >= sum_j s_j mu_j.
    Returns (C, n).
    """
    base = regime2_base(spectrum, x_star_norm, omega_bar)
    target = spectrum.mean_attenuation
    c = start
    for _ in range(max_doublings):
        n = max(1, math.ceil(c * base))
        try:
            if gamma_star(spectrum, x_star_norm, omega_bar, n) >= target:
                return c, n
        except SampleSizeError:
            pass
        c *= 2.0
    raise SampleSizeError(f"no doubling constant found within {max_doublings} doublings")


def rho(spectrum: Spectrum, x_star_norm: float) -> float:
    if x_star_norm < 0.0:
        raise ValueError("x_star_norm must be >= 0")
    mu = spectrum.attenuations
    denom = np.maximum((mu * x_star_norm) ** 4, 1.0)
    return float(1.0 / np.sum(spectrum.weights * mu / denom))


WidthOracle = Callable[[FloatArray], FloatArray]


def ball_width_oracle(x_star: Image) -> WidthOracle:
    """Maximising direction for a ball around x*: the component of g orthogonal to x*."""
    unit = _unit(x_star)

    def oracle(g: FloatArray) -> FloatArray:
        return g - (g @ unit) * unit

    return oracle


def _unit(v: FloatArray) -> FloatArray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0.0 else np.zeros_like(v)


def _ball_width(d: int) -> float:
    if d < 2:
        return 0.0
    return math.exp(0.5 * math.log(2.0) + gammaln(d / 2.0) - gammaln((d - 1) / 2.0))


def gaussian_width(
    X: ConstraintSet,
    x_star: Image,
    n_mc: int = 10_000,
    seed: int = 0,
    *,
    oracle: WidthOracle | None = None,
) -> float:
    """
    omega_bar(x*, X). Closed form for an l2 ball centred at x*; otherwise a Monte Carlo average
    of <P v, g> / ||P v|| with v from the supplied linear-maximisation oracle (P projects out x*).
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    if oracle is None:
        if isinstance(X, L2Ball) and np.allclose(X.center, x_star):
            return _ball_width(x_star.size)
        raise ValueError(f"gaussian width of {type(X).__name__} needs a linear-maximisation oracle")
    unit = _unit(x_star)
    rng = make_rng(seed, "gaussian_width")
    total = 0.0
    for _ in range(n_mc):
        g = rng.standard_normal(x_star.size)
        v = oracle(g)
        pv = v - (v @ unit) * unit
        norm = float(np.linalg.norm(pv))
        if norm > 0.0:
            total += float(pv @ g) / norm
    return total / n_mc


def _sample_directions(rng: np.random.Generator, x_star: FloatArray, count: int) -> FloatArray:
    """Unit directions with a uniformly random cosine to x*, so the x* axis is explored too."""
    d = x_star.size
    unit = _unit(x_star)
    g = rng.standard_normal((count, d))
    if not unit.any():
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    perp = g - np.outer(g @ unit, unit)
    perp /= np.maximum(np.linalg.norm(perp, axis=1, keepdims=True), 1e-300)
    cos = rng.uniform(-1.0, 1.0, size=count)
    return cos[:, None] * unit[None, :] + np.sqrt(1.0 - cos * cos)[:, None] * perp


def _sampling_radius(X: ConstraintSet, x_star: FloatArray) -> float:
    if isinstance(X, L2Ball):
        return X.radius
    return max(float(np.linalg.norm(x_star)), 1.0)


def sample_feasible(
    X: ConstraintSet, x_star: FloatArray, count: int, rng: np.random.Generator, *, spread: float = 1.0
) -> list[FloatArray]:
    """Points P_X(x* + spread * R * r * u) with r ~ U(0, 1) and random unit u."""
    radius = spread * _sampling_radius(X, x_star)
    dirs = _sample_directions(rng, x_star, count)
    scales = radius * rng.uniform(0.0, 1.0, size=count)
    return [X.project(x_star + s * u) for s, u in zip(scales, dirs, strict=True)]


def restricted_eigs(
    A: SystemMatrix, X: ConstraintSet, x_star: Image, n_samples: int = 200, seed: int = 0
) -> tuple[float, float]:
    """(lambda_max(Sigma), Monte Carlo upper estimate of lambda_min(Sigma, X - X))."""
    x_star = np.asarray(x_star, dtype=np.float64)
    lmax = lambda_max(A)
    rng = make_rng(seed, "restricted_eigs")
    first = sample_feasible(X, x_star, n_samples, rng)
    second = sample_feasible(X, x_star, n_samples, rng)
    n = A.n_rows
    best = math.inf
    for x, xp in zip(first, second, strict=True):
        v = x - xp
        norm = float(np.linalg.norm(v))
        if norm < 1e-12:
            continue
        best = min(best, float(np.linalg.norm(A.rdot(A.dot(v)) / n)) / norm)
    if not math.isfinite(best):
        raise EigenvalueError("no distinct feasible pairs were sampled")
    return lmax, best


def kappa(
    A: SystemMatrix,
    X: ConstraintSet,
    spectrum: Spectrum | WindowedSpectra,
    *,
    x_star: Image | None = None,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Estimate of exp(mu_max * max_{x in X, i} <a_i, x>) * lambda_max / lambda_min(Sigma, X - X)."""
    anchor = np.zeros(A.n_cols) if x_star is None else np.asarray(x_star, dtype=np.float64)
    lmax, lmin = restricted_eigs(A, X, anchor, n_samples, seed)
    if not lmin > 0.0:
        raise EigenvalueError("restricted eigenvalue not resolved (estimate <= 0)")
    rng = make_rng(seed, "kappa_support")
    probes = sample_feasible(X, anchor, n_samples, rng, spread=10.0)
    probes.append(X.project(anchor))
    t_max = max(float(np.max(A.dot(p))) for p in probes)
    mu_max = spectrum.mu_max
    return math.exp(mu_max * max(t_max, 0.0)) * lmax / lmin


def err_term_ball(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x_star: Image) -> float:
    """||F(x*)||_2: exactly Err for a ball, an upper proxy for subsets of a ball."""
    return float(np.linalg.norm(operator_F(A, spectra, y, np.asarray(x_star, dtype=np.float64))))


def poisson_err_expectation(A: SystemMatrix, spectra: WindowedSpectra, x_star: Image) -> float:
    """E[Err^2] under Poisson noise: (1/n^2) sum_w I_w sum_i ||a_i||^2 h_w(<a_i, x*>)."""
    t = A.dot(np.asarray(x_star, dtype=np.float64))
    norms = A.row_norms_sq()
    n_total = A.n_rows * spectra.n_windows
    total = 0.0
    for window in spectra.windows:
        total += float(np.sum(norms * window.intensities(A.n_rows) * window.response(t)))
    return total / n_total**2


def gaussian_err_expectation(A: SystemMatrix, sigma: float, *, n_windows: int = 1) -> float:
    """E[Err^2] contributed by N(0, sigma^2) electronic noise: (sigma^2 / n^2) W sum_i ||a_i||^2."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    n_total = A.n_rows * n_windows
    return sigma**2 * n_windows * float(np.sum(A.row_norms_sq())) / n_total**2


def poisson_err_bound(
    A: SystemMatrix,
    spectrum: Spectrum | WindowedSpectra,
    x_star: Image,
    delta: float,
    *,
    constant: float = 1.0,
) -> float:
    """
    High-probability Err bound for Poisson noise:
    sqrt(I sum_i ||a_i||^2 h(<a_i, x*>)) / n + C I sqrt(||A A^T||_F) / n * log(2 / delta), with C = 1.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta!r}")
    spectra = spectrum if isinstance(spectrum, WindowedSpectra) else WindowedSpectra.single(spectrum)
    n_total = A.n_rows * spectra.n_windows
    first = math.sqrt(poisson_err_expectation(A, spectra, x_star) * n_total**2) / n_total
    peak = sum(float(np.max(w.intensities(A.n_rows))) for w in spectra.windows)
    second = constant * peak * math.sqrt(A.gram_frobenius()) / n_total * math.log(2.0 / delta)
    return first + second


def theorem1_envelope(nu: float, L: float, err: float, x1_dist: float) -> Callable[[float], float]:
    """t -> (1 - nu / (8 L))^{t/2} * ||x_1 - x*|| + 4 err / nu."""
    if not nu > 0.0:
        raise ValueError(f"nu must be > 0, got {nu!r}")
    if nu > L:
        raise ValueError(f"nu ({nu!r}) cannot exceed L ({L!r})")
    if err < 0.0:
        raise ValueError("err must be >= 0")
    rate = 1.0 - nu / (8.0 * L)
    floor = 4.0 * err / nu

    def envelope(t: float) -> float:
        return rate ** (t / 2.0) * x1_dist + floor

    return envelope


def empirical_nu(
    A: SystemMatrix,
    spectra: WindowedSpectra,
    x_star: Image,
    X: ConstraintSet,
    n_samples: int = 500,
    seed: int = 0,
) -> float:
    """Monte Carlo upper estimate of the restricted strong-monotonicity constant around x*."""
    x_star = np.asarray(x_star, dtype=np.float64)
    y = expected_counts(A, x_star, spectra)
    f_star = operator_F(A, spectra, y, x_star)
    rng = make_rng(seed, "empirical_nu")
    best = math.inf
    for x in sample_feasible(X, x_star, n_samples, rng):
        diff = x - x_star
        sq = float(diff @ diff)
        if sq < 1e-18:
            continue
        best = min(best, float((operator_F(A, spectra, y, x) - f_star) @ diff) / sq)
    if not math.isfinite(best):
        raise ValueError("no feasible sample differed from x_star")
    return max(best, 0.0)


ENVELOPE_SAMPLE_ITERS = (0, 10, 100, 1000)


@dataclass
class TheoryReport:
    gamma_star: float | None
    omega_bar: float
    omega_bar_is_surrogate: bool
    rho: float
    kappa: float | None
    nu_hat: float
    L_hat: float
    err_value: float
    err_poisson_bound: float
    x1_dist: float
    envelope: Callable[[float], float] | None = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out.pop("envelope")
        out["nu_hat_is_estimate"] = True
        out["kappa_is_estimate"] = True
        if self.envelope is not None:
            out["envelope"] = {str(t): self.envelope(float(t)) for t in ENVELOPE_SAMPLE_ITERS}
        return out


def build_theory_report(
    A: SystemMatrix,
    spectra: WindowedSpectra,
    y: MeasurementSet,
    x_star: Image,
    X: ConstraintSet,
    x1: Image,
    *,
    n_samples: int = 200,
    seed: int = 0,
) -> TheoryReport:
    """
    Evaluate every theory quantity for one problem. Scalar spectrum quantities (gamma*, rho) use
    the first window. For sets other than a ball around x*, the ball width at the distance of x_1
    stands in for omega_bar and is flagged as a surrogate.
    """
    x_star = np.asarray(x_star, dtype=np.float64)
    first = spectra.windows[0]
    if not isinstance(first, Spectrum):
        raise TypeError("theory report needs a shared-weight spectrum in the first window")
    x_norm = float(np.linalg.norm(x_star))
    surrogate = not (isinstance(X, L2Ball) and np.allclose(X.center, x_star))
    omega = _ball_width(x_star.size)
    L_hat = lipschitz_bound(A, spectra)
    n_total = A.n_rows * spectra.n_windows
    try:
        g_star: float | None = gamma_star(first, x_norm, omega, n_total)
    except SampleSizeError as exc:
        logger.warning("gamma* undefined: %s", exc)
        g_star = None
    try:
        k_val: float | None = kappa(A, X, spectra, x_star=x_star, n_samples=n_samples, seed=seed)
    except EigenvalueError as exc:
        logger.warning("kappa not resolved: %s", exc)
        k_val = None
    nu_hat = min(empirical_nu(A, spectra, x_star, X, n_samples, seed), L_hat)
    err = err_term_ball(A, spectra, y, x_star)
    x1_dist = float(np.linalg.norm(np.asarray(x1, dtype=np.float64) - x_star))
    envelope = theorem1_envelope(nu_hat, L_hat, err, x1_dist) if nu_hat > 0.0 else None
    return TheoryReport(
        gamma_star=g_star,
        omega_bar=omega,
        omega_bar_is_surrogate=surrogate,
        rho=rho(first, x_norm),
        kappa=k_val,
        nu_hat=nu_hat,
        L_hat=L_hat,
        err_value=err,
        err_poisson_bound=poisson_err_bound(A, spectra, x_star, 0.05),
        x1_dist=x1_dist,
        envelope=envelope,
    )
