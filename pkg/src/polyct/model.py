"""
Polychromatic forward model: attenuation response h, expected photon counts, noise sampling,
and the known-materials reparameterisation.

A detector window is either a ``Spectrum`` (same weights for every ray) or a ``PerRaySpectrum``
(weights and intensity vary per ray, produced by the known-materials reparameterisation).
Windows are stacked into one ray list; ``MeasurementSet`` keeps the window offsets.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logsumexp, softmax

from .errors import DimensionMismatchError, SpectrumValidationError
from .rng import make_rng

if TYPE_CHECKING:
    from .geometry import SystemMatrix

logger = logging.getLogger(__name__)

FloatArray: TypeAlias = NDArray[np.float64]
Image: TypeAlias = NDArray[np.float64]

WEIGHT_SUM_TOL = 1e-12


def _as_vector(values: ArrayLike, field: str, *, window: int | None = None) -> FloatArray:
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SpectrumValidationError(field, f"not numeric ({exc!s})", window=window) from exc
    if arr.ndim != 1:
        raise SpectrumValidationError(field, "must be a flat list", window=window)
    for i, v in enumerate(arr):
        if not math.isfinite(v):
            raise SpectrumValidationError(field, "must be finite", index=i, window=window)
    return arr


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One detector window's calibration: weights s_j, attenuations mu_j, mean intensity I."""

    weights: FloatArray
    attenuations: FloatArray
    intensity: float
    window: int | None = None

    def __post_init__(self) -> None:
        w = _as_vector(self.weights, "weights", window=self.window)
        mu = _as_vector(self.attenuations, "attenuations", window=self.window)
        if w.size == 0:
            raise SpectrumValidationError("weights", "at least one wavelength bin is required", window=self.window)
        if w.size != mu.size:
            raise SpectrumValidationError(
                "attenuations",
                f"length {mu.size} does not match weights length {w.size}",
                window=self.window,
            )
        for i, s in enumerate(w):
            if not 0.0 < s <= 1.0:
                raise SpectrumValidationError("weights", f"must be in (0, 1], got {s!r}", index=i, window=self.window)
        if abs(float(w.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise SpectrumValidationError("weights", f"must sum to 1, got {float(w.sum())!r}", window=self.window)
        for i, m in enumerate(mu):
            if m <= 0.0:
                raise SpectrumValidationError("attenuations", f"must be > 0, got {m!r}", index=i, window=self.window)
        intensity = float(self.intensity)
        if not math.isfinite(intensity) or intensity <= 0.0:
            raise SpectrumValidationError(
                "intensity", f"must be a finite value > 0, got {self.intensity!r}", window=self.window
            )
        w.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "attenuations", mu)
        object.__setattr__(self, "intensity", intensity)

    @property
    def n_bins(self) -> int:
        return int(self.weights.size)

    @property
    def mu_max(self) -> float:
        return float(self.attenuations.max())

    @property
    def mean_attenuation(self) -> float:
        """sum_j s_j mu_j, the bound on |h'| over t > 0."""
        return float(self.weights @ self.attenuations)

    @property
    def lipschitz_weight(self) -> float:
        return self.intensity * self.mean_attenuation

    @property
    def curvature_weight(self) -> float:
        return self.intensity * float(self.weights @ self.attenuations**2)

    def intensities(self, n_rays: int) -> FloatArray:
        return np.full(n_rays, self.intensity)

    def slope_bounds(self, n_rays: int) -> FloatArray:
        return np.full(n_rays, self.lipschitz_weight)

    def response(self, t: ArrayLike) -> FloatArray:
        """h(t) per ray, with negative arguments clamped to zero."""
        tp = np.maximum(np.asarray(t, dtype=np.float64), 0.0)
        return np.exp(-np.multiply.outer(tp, self.attenuations)) @ self.weights

    def slope(self, t: ArrayLike) -> FloatArray:
        """|h'(t)| per ray: the right derivative at t = 0, zero for t < 0."""
        tt = np.asarray(t, dtype=np.float64)
        vals = np.exp(-np.multiply.outer(np.maximum(tt, 0.0), self.attenuations)) @ (self.weights * self.attenuations)
        return np.where(tt >= 0.0, vals, 0.0)

    def tilted_moments(self, z: ArrayLike) -> tuple[FloatArray, FloatArray, FloatArray]:
        """log H(z), E_w[mu], E_w[mu^2] for H(z) = sum_j s_j exp(-mu_j z) with no clamping."""
        zz = np.asarray(z, dtype=np.float64)
        logits = np.log(self.weights) - np.multiply.outer(zz, self.attenuations)
        return _moments(logits, self.attenuations)


@dataclass(frozen=True, eq=False)
class PerRaySpectrum:
    """A window whose weights (n_rays x W) and intensity (n_rays) vary by ray."""

    weights: FloatArray
    attenuations: FloatArray
    intensity: FloatArray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.attenuations, dtype=np.float64)
        inten = np.asarray(self.intensity, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != mu.size or inten.shape != (w.shape[0],):
            raise SpectrumValidationError(
                "weights",
                f"per-ray weights {w.shape} must be (n_rays, {mu.size}) with intensity of length n_rays",
            )
        if np.any(mu <= 0.0):
            raise SpectrumValidationError("attenuations", "must be > 0", index=int(np.argmax(mu <= 0.0)))
        if np.any(~np.isfinite(inten)) or np.any(inten <= 0.0):
            raise SpectrumValidationError("intensity", "must be finite and > 0", index=int(np.argmax(~(inten > 0.0))))
        if np.any(w <= 0.0) or np.any(w > 1.0):
            raise SpectrumValidationError("weights", "must be in (0, 1]")
        sums = w.sum(axis=1)
        bad = np.abs(sums - 1.0) > WEIGHT_SUM_TOL
        if np.any(bad):
            raise SpectrumValidationError("weights", "row must sum to 1", index=int(np.argmax(bad)))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "attenuations", mu)
        object.__setattr__(self, "intensity", inten)

    @property
    def n_rays(self) -> int:
        return int(self.weights.shape[0])

    @property
    def mu_max(self) -> float:
        return float(self.attenuations.max())

    @property
    def mean_attenuation(self) -> float:
        return float(np.max(self.weights @ self.attenuations))

    @property
    def lipschitz_weight(self) -> float:
        return float(np.max(self.intensity * (self.weights @ self.attenuations)))

    @property
    def curvature_weight(self) -> float:
        return float(np.max(self.intensity * (self.weights @ self.attenuations**2)))

    def intensities(self, n_rays: int) -> FloatArray:
        if n_rays != self.n_rays:
            raise DimensionMismatchError(f"per-ray spectrum has {self.n_rays} rays, system has {n_rays}")
        return self.intensity

    def slope_bounds(self, n_rays: int) -> FloatArray:
        """Per-ray bound I_i * sum_j s_ij mu_j on |d/dt I_i h_i(t)|."""
        return self.intensities(n_rays) * (self.weights @ self.attenuations)

    def response(self, t: ArrayLike) -> FloatArray:
        tp = np.maximum(np.asarray(t, dtype=np.float64), 0.0)
        return np.sum(np.exp(-np.multiply.outer(tp, self.attenuations)) * self.weights, axis=-1)

    def slope(self, t: ArrayLike) -> FloatArray:
        tt = np.asarray(t, dtype=np.float64)
        vals = np.sum(
            np.exp(-np.multiply.outer(np.maximum(tt, 0.0), self.attenuations)) * self.weights * self.attenuations,
            axis=-1,
        )
        return np.where(tt >= 0.0, vals, 0.0)

    def tilted_moments(self, z: ArrayLike) -> tuple[FloatArray, FloatArray, FloatArray]:
        zz = np.asarray(z, dtype=np.float64)
        logits = np.log(self.weights) - np.multiply.outer(zz, self.attenuations)
        return _moments(logits, self.attenuations)


Window: TypeAlias = Spectrum | PerRaySpectrum


def _moments(logits: FloatArray, mu: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    log_h = logsumexp(logits, axis=-1)
    p = softmax(logits, axis=-1)
    return log_h, p @ mu, p @ (mu * mu)


@dataclass(frozen=True, eq=False)
class WindowedSpectra:
    windows: tuple[Window, ...]

    def __post_init__(self) -> None:
        windows = tuple(self.windows)
        if not windows:
            raise SpectrumValidationError("windows", "at least one detector window is required")
        object.__setattr__(self, "windows", windows)

    @classmethod
    def single(cls, spectrum: Window) -> WindowedSpectra:
        return cls(windows=(spectrum,))

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    @property
    def mu_max(self) -> float:
        return max(w.mu_max for w in self.windows)

    @property
    def lipschitz_weight(self) -> float:
        """sum over windows of I_w * sum_j s_wj mu_wj."""
        return float(sum(w.lipschitz_weight for w in self.windows))

    def slope_bounds(self, n_rays: int) -> FloatArray:
        """Per-ray slope bound summed over windows; its max is at most lipschitz_weight."""
        return np.sum([w.slope_bounds(n_rays) for w in self.windows], axis=0)

    @property
    def curvature_weight(self) -> float:
        return float(sum(w.curvature_weight for w in self.windows))

    def scaled(self, factor: float) -> WindowedSpectra:
        """Same spectra with every intensity multiplied by factor."""
        out: list[Window] = []
        for w in self.windows:
            if isinstance(w, Spectrum):
                out.append(Spectrum(w.weights, w.attenuations, w.intensity * factor, window=w.window))
            else:
                out.append(PerRaySpectrum(w.weights, w.attenuations, w.intensity * factor))
        return WindowedSpectra(tuple(out))


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Counts for all windows, stacked window after window."""

    counts: FloatArray
    window_boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 1:
            raise DimensionMismatchError("counts must be a flat vector")
        if not np.all(np.isfinite(counts)):
            raise ValueError(f"counts must be finite (first bad index {int(np.argmax(~np.isfinite(counts)))})")
        bounds = tuple((int(a), int(b)) for a, b in self.window_boundaries)
        if not bounds:
            raise DimensionMismatchError("window_boundaries must be nonempty")
        expected = 0
        for k, (a, b) in enumerate(bounds):
            if a != expected or b < a:
                raise DimensionMismatchError(f"window_boundaries[{k}] = ({a}, {b}) is not contiguous")
            expected = b
        if expected != counts.size:
            raise DimensionMismatchError(f"window_boundaries cover {expected} entries but counts has {counts.size}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "window_boundaries", bounds)

    @property
    def n_total(self) -> int:
        return int(self.counts.size)

    @property
    def n_windows(self) -> int:
        return len(self.window_boundaries)

    def window(self, k: int) -> FloatArray:
        a, b = self.window_boundaries[k]
        return self.counts[a:b]

    def with_counts(self, counts: ArrayLike) -> MeasurementSet:
        return MeasurementSet(np.asarray(counts, dtype=np.float64), self.window_boundaries)


def attenuation_response(spectrum: Spectrum, t: float) -> float:
    return float(spectrum.response(np.array([t]))[0])


def attenuation_derivative_magnitude(spectrum: Spectrum, t: float) -> float:
    """|h'(t)| = sum_j s_j mu_j exp(-mu_j t), defined for t > 0."""
    if not t > 0.0:
        raise ValueError(f"attenuation derivative is only defined for t > 0, got {t!r}")
    return float(spectrum.weights @ (spectrum.attenuations * np.exp(-spectrum.attenuations * t)))


def expected_counts(A: SystemMatrix, x: Image, spectra: WindowedSpectra) -> MeasurementSet:
    """Mean counts I_w * h_w(<a_i, x>) for every window w and ray i."""
    x_arr = np.asarray(x, dtype=np.float64)
    if x_arr.ndim != 1 or x_arr.size != A.n_cols:
        raise DimensionMismatchError(f"image has {x_arr.size} entries, system matrix has {A.n_cols} columns")
    if not np.all(np.isfinite(x_arr)):
        raise ValueError("image must be finite")
    t = A.dot(x_arr)
    return means_from_projections(t, spectra)


def means_from_projections(t: FloatArray, spectra: WindowedSpectra) -> MeasurementSet:
    parts: list[FloatArray] = []
    bounds: list[tuple[int, int]] = []
    offset = 0
    for window in spectra.windows:
        means = window.intensities(t.size) * window.response(t)
        parts.append(means)
        bounds.append((offset, offset + t.size))
        offset += t.size
    return MeasurementSet(np.concatenate(parts), tuple(bounds))


def sample_poisson(means: MeasurementSet, seed: int) -> MeasurementSet:
    """Independent Poisson draws per entry from the seeded Philox stream."""
    lam = means.counts
    if np.any(lam < 0.0):
        raise ValueError(f"Poisson means must be >= 0 (first negative index {int(np.argmax(lam < 0.0))})")
    rng = make_rng(seed, "poisson")
    return means.with_counts(rng.poisson(lam).astype(np.float64))


def add_gaussian_noise(y: MeasurementSet, sigma: float, seed: int) -> MeasurementSet:
    """Additive electronic noise N(0, sigma^2) per entry."""
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma!r}")
    if sigma == 0.0:
        return y.with_counts(y.counts.copy())
    rng = make_rng(seed, "electronic")
    return y.with_counts(y.counts + sigma * rng.standard_normal(y.n_total))


def _reparameterized_weights(
    log_weights: FloatArray, exponents: FloatArray
) -> tuple[FloatArray, FloatArray]:
    logits = log_weights - exponents
    log_total = logsumexp(logits, axis=-1)
    weights = np.exp(logits - np.expand_dims(log_total, -1))
    # weights that underflow are kept strictly positive; renormalise after the clamp
    weights = np.maximum(weights, np.finfo(np.float64).tiny)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return weights, np.exp(log_total)


def reparameterize_known_materials(spectrum: Spectrum, exponents: ArrayLike) -> Spectrum:
    """
    Fold known materials into the spectrum for one ray.

    ``exponents[j]`` is the known materials' attenuation along the ray at wavelength j
    (sum over known materials of mu_{m,j} <a_i^m, x^m>). Returns I' = I * sum_j s_j e^{-e_j}
    and s'_j = s_j e^{-e_j} / sum_k s_k e^{-e_k}.
    """
    e = np.asarray(exponents, dtype=np.float64)
    if e.shape != spectrum.weights.shape:
        raise DimensionMismatchError(f"expected {spectrum.n_bins} exponents, got shape {e.shape}")
    if np.any(np.isnan(e)) or np.any(e < 0.0):
        raise ValueError(f"exponents must be >= 0 (first bad index {int(np.argmax(~(e >= 0.0)))})")
    if not np.any(e):
        return Spectrum(
            spectrum.weights.copy(), spectrum.attenuations.copy(), spectrum.intensity, window=spectrum.window
        )
    weights, total = _reparameterized_weights(np.log(spectrum.weights), e)
    intensity = spectrum.intensity * float(total)
    if intensity <= 0.0:
        raise ValueError("known materials absorb every photon on this ray; intensity underflows to zero")
    return Spectrum(weights, spectrum.attenuations.copy(), intensity, window=spectrum.window)


def reparameterize_rays(spectrum: Spectrum, exponents: ArrayLike) -> PerRaySpectrum:
    """Vectorised known-materials reparameterisation; ``exponents`` has shape (n_rays, W)."""
    e = np.asarray(exponents, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != spectrum.n_bins:
        raise DimensionMismatchError(f"exponents must be (n_rays, {spectrum.n_bins}), got {e.shape}")
    if np.any(np.isnan(e)) or np.any(e < 0.0):
        raise ValueError("exponents must be >= 0")
    weights, total = _reparameterized_weights(np.log(spectrum.weights), e)
    intensity = spectrum.intensity * total
    if np.any(intensity <= 0.0):
        raise ValueError(f"intensity underflows to zero on ray {int(np.argmax(intensity <= 0.0))}")
    return PerRaySpectrum(weights, spectrum.attenuations.copy(), intensity)


def default_spectrum(*, n_bins: int = 50, intensity: float = 1e6) -> Spectrum:
    """
    Synthetic PMMA-like source: mu_j log-spaced in [0.2, 5.0], weights a bell curve peaked
    at bin n_bins/3. Stands in for a tabulated spectrum, which is not published.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    mu = np.logspace(np.log10(0.2), np.log10(5.0), n_bins)
    j = np.arange(n_bins, dtype=np.float64)
    width = max(n_bins / 6.0, 0.5)
    bell = np.exp(-0.5 * ((j - n_bins / 3.0) / width) ** 2)
    return Spectrum(bell / bell.sum(), mu, intensity)


def default_spectra(*, intensity: float = 1e6, n_bins: int = 50, n_windows: int = 3) -> WindowedSpectra:
    """
    Split the synthetic source into overlapping detector windows. Each window's sensitivity
    is a smooth box over a third of the bins, widened so neighbouring windows overlap.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    base = default_spectrum(n_bins=n_bins, intensity=intensity)
    if n_windows == 1:
        return WindowedSpectra.single(base)
    j = np.arange(n_bins, dtype=np.float64)
    span = n_bins / n_windows
    overlap = 0.25 * span
    edge = max(span / 10.0, 0.5)
    windows: list[Window] = []
    for k in range(n_windows):
        lo = k * span - overlap
        hi = (k + 1) * span + overlap
        sensitivity = expit((j - lo) / edge) * expit((hi - j) / edge)
        raw = base.weights * sensitivity
        total = float(raw.sum())
        windows.append(Spectrum(raw / total, base.attenuations.copy(), intensity * total, window=k))
    return WindowedSpectra(tuple(windows))


def spectra_from_dict(data: dict[str, Any]) -> WindowedSpectra:
    raw_windows = data.get("windows")
    if not isinstance(raw_windows, list) or not raw_windows:
        raise SpectrumValidationError("windows", "must be a nonempty list")
    windows: list[Window] = []
    for k, entry in enumerate(raw_windows):
        if not isinstance(entry, dict):
            raise SpectrumValidationError("windows", "each window must be an object", index=k)
        for key in ("intensity", "weights", "attenuations"):
            if key not in entry:
                raise SpectrumValidationError(key, "missing", window=k)
        try:
            intensity = float(entry["intensity"])
        except (TypeError, ValueError) as exc:
            raise SpectrumValidationError("intensity", f"not numeric ({exc!s})", window=k) from exc
        windows.append(Spectrum(entry["weights"], entry["attenuations"], intensity, window=k))
    return WindowedSpectra(tuple(windows))


def spectra_to_dict(spectra: WindowedSpectra) -> dict[str, Any]:
    out: list[dict[str, Any]] = []
    for w in spectra.windows:
        if not isinstance(w, Spectrum):
            raise TypeError("per-ray spectra have no JSON form")
        out.append(
            {"intensity": w.intensity, "weights": w.weights.tolist(), "attenuations": w.attenuations.tolist()}
        )
    return {"windows": out}


def load_spectra(path: str | Path) -> WindowedSpectra:
    path_obj = Path(path)
    try:
        raw = path_obj.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"Could not read spectra file {path_obj.name!r}: {exc!s}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"Invalid JSON in spectra file {path_obj.name!r}. {exc!s}") from exc
    if not isinstance(data, dict):
        raise SpectrumValidationError("windows", "spectra document must be a JSON object")
    spectra = spectra_from_dict(data)
    logger.debug("Loaded %d detector window(s) from %s", spectra.n_windows, path_obj)
    return spectra
