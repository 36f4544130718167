"""Operator F and the per-solver losses, all over the stacked multi-window measurements."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .errors import DimensionMismatchError
from .geometry import SystemMatrix
from .model import FloatArray, Image, MeasurementSet, Window, WindowedSpectra


def check_dimensions(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image | None = None) -> None:
    if y.n_windows != spectra.n_windows:
        raise DimensionMismatchError(f"measurements have {y.n_windows} windows, spectra have {spectra.n_windows}")
    for k, (a, b) in enumerate(y.window_boundaries):
        if b - a != A.n_rows:
            raise DimensionMismatchError(f"window {k} has {b - a} measurements, system matrix has {A.n_rows} rays")
    if x is not None and (x.ndim != 1 or x.size != A.n_cols):
        raise DimensionMismatchError(f"image has {x.size} entries, system matrix has {A.n_cols} columns")


def _windows(
    spectra: WindowedSpectra, y: MeasurementSet, t: FloatArray
) -> Iterator[tuple[Window, FloatArray, FloatArray]]:
    """(window, intensity per ray, counts) for each detector window."""
    for k, window in enumerate(spectra.windows):
        yield window, window.intensities(t.size), y.window(k)


def operator_F(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image) -> Image:
    """F(x) = (1/n) sum over windows and rays of (y_i - I h(<a_i, x>)) a_i, n the stacked ray count."""
    check_dimensions(A, spectra, y, x)
    t = A.dot(x)
    residual = np.zeros(A.n_rows)
    for window, intensity, counts in _windows(spectra, y, t):
        residual += counts - intensity * window.response(t)
    return A.rdot(residual) / y.n_total


def mse_loss(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image) -> float:
    check_dimensions(A, spectra, y, x)
    t = A.dot(x)
    total = 0.0
    for window, intensity, counts in _windows(spectra, y, t):
        total += float(np.sum((intensity * window.response(t) - counts) ** 2))
    return total / y.n_total


def mse_gradient(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image) -> Image:
    """(2/n) A^T [(I h - y) * I h'], with h' = 0 where <a_i, x> < 0."""
    check_dimensions(A, spectra, y, x)
    t = A.dot(x)
    weights = np.zeros(A.n_rows)
    for window, intensity, counts in _windows(spectra, y, t):
        weights -= (intensity * window.response(t) - counts) * intensity * window.slope(t)
    return 2.0 * A.rdot(weights) / y.n_total


def l1_loss(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image) -> float:
    check_dimensions(A, spectra, y, x)
    t = A.dot(x)
    total = 0.0
    for window, intensity, counts in _windows(spectra, y, t):
        total += float(np.sum(np.abs(intensity * window.response(t) - counts)))
    return total / y.n_total


def l1_subgradient(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image) -> Image:
    check_dimensions(A, spectra, y, x)
    t = A.dot(x)
    weights = np.zeros(A.n_rows)
    for window, intensity, counts in _windows(spectra, y, t):
        weights -= np.sign(intensity * window.response(t) - counts) * intensity * window.slope(t)
    return A.rdot(weights) / y.n_total


def poisson_nll(A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: Image) -> float:
    """(1/n) sum of I h - y log(I h); the y log y constant is dropped."""
    check_dimensions(A, spectra, y, x)
    t = A.dot(x)
    total = 0.0
    for window, intensity, counts in _windows(spectra, y, t):
        mean = intensity * window.response(t)
        total += float(np.sum(mean - counts * np.log(mean)))
    return total / y.n_total


def rmse(x_hat: Image, x_star: Image) -> float:
    diff = np.asarray(x_hat, dtype=np.float64) - np.asarray(x_star, dtype=np.float64)
    return float(np.sqrt(np.mean(diff * diff)))
