from __future__ import annotations

import numpy as np
import pytest

from polyct.errors import DimensionMismatchError
from polyct.geometry import (
    ParallelBeamGeometry,
    SystemMatrix,
    build_gaussian_matrix,
    build_radon_matrix,
    make_pmma_phantom,
)
from polyct.model import MeasurementSet, Spectrum, WindowedSpectra, default_spectra, expected_counts, sample_poisson
from polyct.problem import l1_loss, l1_subgradient, mse_gradient, mse_loss, operator_F, poisson_nll, rmse


def _monotone_gap(
    A: SystemMatrix, spectra: WindowedSpectra, y: MeasurementSet, x: np.ndarray, xp: np.ndarray
) -> float:
    diff = x - xp
    inner = float((operator_F(A, spectra, y, x) - operator_F(A, spectra, y, xp)) @ diff)
    return inner + 1e-10 * float(diff @ diff)


def test_operator_is_monotone_on_gaussian_design() -> None:
    A = build_gaussian_matrix(300, 20, 0)
    spectra = WindowedSpectra.single(Spectrum(np.array([1.0]), np.array([1.0]), 1.0))
    rng = np.random.default_rng(0)
    y = expected_counts(A, rng.standard_normal(20), spectra)
    for _ in range(200):
        x, xp = 2.0 * rng.standard_normal(20), 2.0 * rng.standard_normal(20)
        assert _monotone_gap(A, spectra, y, x, xp) >= 0.0


def test_operator_is_monotone_on_stacked_ct_problem() -> None:
    side = 8
    A = build_radon_matrix(ParallelBeamGeometry(n_views=6, n_cells=12, grid_side=side, pixel_size=1.0 / side))
    spectra = default_spectra(intensity=1e4, n_bins=10, n_windows=3)
    y = sample_poisson(expected_counts(A, make_pmma_phantom(side), spectra), 0)
    rng = np.random.default_rng(1)
    for _ in range(200):
        x, xp = rng.uniform(-1.0, 2.0, side * side), rng.uniform(-1.0, 2.0, side * side)
        assert _monotone_gap(A, spectra, y, x, xp) >= 0.0


def test_operator_is_monotone_on_a_full_size_ct_grid() -> None:
    side = 25
    A = build_radon_matrix(ParallelBeamGeometry(n_views=10, n_cells=36, grid_side=side, pixel_size=1.0 / side))
    spectra = default_spectra(intensity=1e4, n_bins=10, n_windows=3)
    y = sample_poisson(expected_counts(A, make_pmma_phantom(side), spectra), 2)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        x, xp = rng.uniform(-1.0, 2.0, side * side), rng.uniform(-1.0, 2.0, side * side)
        assert _monotone_gap(A, spectra, y, x, xp) >= 0.0


def test_operator_is_monotone_in_one_hundred_dimensions() -> None:
    d = 100
    A = build_gaussian_matrix(1000, d, 1)
    spectra = WindowedSpectra.single(Spectrum(np.array([0.4, 0.6]), np.array([0.5, 1.5]), 1.0))
    rng = np.random.default_rng(3)
    y = expected_counts(A, rng.standard_normal(d) / np.sqrt(d), spectra)
    for _ in range(1000):
        x, xp = rng.standard_normal(d), rng.standard_normal(d)
        assert _monotone_gap(A, spectra, y, x, xp) >= 0.0


def test_operator_vanishes_at_truth_for_noiseless_data() -> None:
    A = build_gaussian_matrix(50, 5, 2)
    spectra = default_spectra(intensity=10.0, n_bins=6, n_windows=2)
    x_star = np.array([0.5, -0.2, 0.1, 0.0, 0.3])
    y = expected_counts(A, x_star, spectra)
    assert np.array_equal(operator_F(A, spectra, y, x_star), np.zeros(5))
    assert mse_loss(A, spectra, y, x_star) == 0.0
    assert l1_loss(A, spectra, y, x_star) == 0.0


def test_mse_gradient_matches_finite_differences() -> None:
    side = 8
    A = build_radon_matrix(ParallelBeamGeometry(n_views=4, n_cells=12, grid_side=side, pixel_size=1.0 / side))
    spectra = default_spectra(intensity=50.0, n_bins=6, n_windows=2)
    y = expected_counts(A, make_pmma_phantom(side), spectra)
    x = np.full(side * side, 0.7)
    grad = mse_gradient(A, spectra, y, x)
    rng = np.random.default_rng(3)
    direction = rng.standard_normal(side * side)
    eps = 1e-6
    numeric = (mse_loss(A, spectra, y, x + eps * direction) - mse_loss(A, spectra, y, x - eps * direction)) / (2 * eps)
    assert float(grad @ direction) == pytest.approx(numeric, rel=1e-5)


def _gradient_problem() -> tuple[SystemMatrix, WindowedSpectra, MeasurementSet]:
    side = 8
    A = build_radon_matrix(ParallelBeamGeometry(n_views=4, n_cells=12, grid_side=side, pixel_size=1.0 / side))
    spectra = default_spectra(intensity=50.0, n_bins=6, n_windows=2)
    return A, spectra, sample_poisson(expected_counts(A, make_pmma_phantom(side), spectra), 7)


def test_mse_gradient_matches_finite_differences_at_many_points() -> None:
    A, spectra, y = _gradient_problem()
    rng = np.random.default_rng(4)
    eps = 1e-6
    for _ in range(50):
        x = rng.uniform(0.2, 1.5, A.n_cols)
        direction = rng.standard_normal(A.n_cols)
        upper = mse_loss(A, spectra, y, x + eps * direction)
        lower = mse_loss(A, spectra, y, x - eps * direction)
        numeric = (upper - lower) / (2 * eps)
        assert float(mse_gradient(A, spectra, y, x) @ direction) == pytest.approx(numeric, rel=1e-5, abs=1e-6)


def test_l1_subgradient_matches_finite_differences_off_the_kinks() -> None:
    A, spectra, y = _gradient_problem()
    rng = np.random.default_rng(5)
    eps = 1e-7
    for _ in range(20):
        x = rng.uniform(0.2, 1.5, A.n_cols)
        direction = rng.standard_normal(A.n_cols)
        upper = l1_loss(A, spectra, y, x + eps * direction)
        lower = l1_loss(A, spectra, y, x - eps * direction)
        numeric = (upper - lower) / (2 * eps)
        assert float(l1_subgradient(A, spectra, y, x) @ direction) == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_poisson_nll_is_smallest_near_truth() -> None:
    side = 8
    A = build_radon_matrix(ParallelBeamGeometry(n_views=6, n_cells=12, grid_side=side, pixel_size=1.0 / side))
    spectra = default_spectra(intensity=1e5, n_bins=6, n_windows=1)
    x_star = make_pmma_phantom(side)
    y = expected_counts(A, x_star, spectra)
    at_truth = poisson_nll(A, spectra, y, x_star)
    assert poisson_nll(A, spectra, y, 1.2 * x_star) > at_truth
    assert poisson_nll(A, spectra, y, 0.8 * x_star) > at_truth


def test_dimension_checks() -> None:
    A = build_gaussian_matrix(10, 3, 0)
    spectra = WindowedSpectra.single(Spectrum(np.array([1.0]), np.array([1.0]), 1.0))
    y = MeasurementSet(np.zeros(9), ((0, 9),))
    with pytest.raises(DimensionMismatchError):
        operator_F(A, spectra, y, np.zeros(3))
    y_ok = MeasurementSet(np.zeros(10), ((0, 10),))
    with pytest.raises(DimensionMismatchError):
        operator_F(A, spectra, y_ok, np.zeros(4))


def test_rmse() -> None:
    assert rmse(np.array([1.0, 3.0]), np.array([1.0, 1.0])) == pytest.approx(np.sqrt(2.0))
