from __future__ import annotations

import math

import numpy as np
import pytest

from polyct.errors import DimensionMismatchError, SpectrumValidationError
from polyct.geometry import SystemMatrix
from polyct.model import (
    MeasurementSet,
    PerRaySpectrum,
    Spectrum,
    WindowedSpectra,
    add_gaussian_noise,
    attenuation_derivative_magnitude,
    attenuation_response,
    default_spectra,
    default_spectrum,
    expected_counts,
    reparameterize_known_materials,
    reparameterize_rays,
    sample_poisson,
    spectra_from_dict,
)
from polyct.rng import make_rng


def _two_bin() -> Spectrum:
    return Spectrum(np.array([0.3, 0.7]), np.array([0.5, 2.0]), 100.0)


def test_spectrum_rejects_weights_not_summing_to_one() -> None:
    with pytest.raises(SpectrumValidationError) as excinfo:
        Spectrum(np.array([0.5, 0.4]), np.array([1.0, 2.0]), 10.0)
    assert "weights" in str(excinfo.value)


def test_spectrum_names_field_and_index() -> None:
    with pytest.raises(SpectrumValidationError) as excinfo:
        Spectrum(np.array([0.5, 0.5]), np.array([1.0, -2.0]), 10.0, window=2)
    assert str(excinfo.value).startswith("windows[2].attenuations[1]")


def test_spectrum_rejects_length_mismatch_and_bad_intensity() -> None:
    with pytest.raises(SpectrumValidationError):
        Spectrum(np.array([1.0]), np.array([1.0, 2.0]), 10.0)
    with pytest.raises(SpectrumValidationError):
        Spectrum(np.array([1.0]), np.array([1.0]), 0.0)


def test_response_at_zero_is_one_and_clamps_negative() -> None:
    s = _two_bin()
    assert attenuation_response(s, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert attenuation_response(s, -3.0) == attenuation_response(s, 0.0)


def test_monochromatic_response_is_beer_lambert() -> None:
    s = Spectrum(np.array([1.0]), np.array([0.7]), 1.0)
    for t in (0.1, 1.0, 4.0):
        assert attenuation_response(s, t) == pytest.approx(math.exp(-0.7 * t), rel=1e-14)


def test_response_is_decreasing_and_slope_matches_derivative() -> None:
    s = _two_bin()
    t = np.linspace(0.05, 5.0, 40)
    h = s.response(t)
    assert np.all(np.diff(h) < 0.0)
    assert attenuation_derivative_magnitude(s, 1.0) == pytest.approx(float(s.slope(np.array([1.0]))[0]))
    eps = 1e-6
    numeric = (attenuation_response(s, 1.0 - eps) - attenuation_response(s, 1.0 + eps)) / (2 * eps)
    assert attenuation_derivative_magnitude(s, 1.0) == pytest.approx(numeric, rel=1e-6)


def test_slope_uses_right_derivative_at_kink() -> None:
    s = _two_bin()
    slope = s.slope(np.array([-1.0, 0.0]))
    assert slope[0] == 0.0
    assert slope[1] == pytest.approx(s.mean_attenuation)


def test_derivative_magnitude_rejects_nonpositive() -> None:
    with pytest.raises(ValueError):
        attenuation_derivative_magnitude(_two_bin(), 0.0)


def test_expected_counts_stacks_windows() -> None:
    spectra = default_spectra(intensity=1e4, n_bins=8, n_windows=2)
    A = SystemMatrix.from_dense(np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 0.0]]))
    y = expected_counts(A, np.array([0.2, 0.4]), spectra)
    assert y.n_total == 6
    assert y.window_boundaries == ((0, 3), (3, 6))
    # ray through nothing sees the full window intensity
    assert y.window(0)[2] == pytest.approx(spectra.windows[0].intensity)
    assert y.window(1)[2] == pytest.approx(spectra.windows[1].intensity)


def test_expected_counts_rejects_wrong_image_length() -> None:
    A = SystemMatrix.from_dense(np.eye(3))
    with pytest.raises(DimensionMismatchError):
        expected_counts(A, np.zeros(2), WindowedSpectra.single(_two_bin()))


def test_measurement_set_rejects_gaps() -> None:
    with pytest.raises(DimensionMismatchError):
        MeasurementSet(np.zeros(4), ((0, 2), (3, 4)))


def test_poisson_sampling_is_seeded() -> None:
    means = MeasurementSet(np.full(50, 40.0), ((0, 50),))
    a = sample_poisson(means, 3)
    b = sample_poisson(means, 3)
    c = sample_poisson(means, 4)
    assert np.array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)
    assert np.all(a.counts >= 0.0)
    assert np.all(a.counts == np.round(a.counts))


def test_poisson_rejects_negative_means() -> None:
    with pytest.raises(ValueError):
        sample_poisson(MeasurementSet(np.array([1.0, -1.0]), ((0, 2),)), 0)


def test_poisson_sample_mean_matches_the_rate() -> None:
    means = MeasurementSet(np.full(10_000, 1e6), ((0, 10_000),))
    draws = sample_poisson(means, 21).counts
    # four standard errors of the sample mean: 4 * sqrt(1e6 / 1e4)
    assert abs(float(draws.mean()) - 1e6) <= 40.0


def test_gaussian_noise_zero_sigma_is_identity() -> None:
    y = MeasurementSet(np.array([1.0, 2.0, 3.0]), ((0, 3),))
    out = add_gaussian_noise(y, 0.0, 1)
    assert np.array_equal(out.counts, y.counts)
    noisy = add_gaussian_noise(y, 2.0, 1)
    assert not np.array_equal(noisy.counts, y.counts)


def test_gaussian_noise_variance_and_seeding() -> None:
    y = MeasurementSet(np.full(100_000, 500.0), ((0, 50_000), (50_000, 100_000)))
    sigma = 3.0
    noisy = add_gaussian_noise(y, sigma, 4)
    assert float(np.var(noisy.counts - y.counts)) == pytest.approx(sigma**2, rel=0.05)
    assert noisy.window_boundaries == y.window_boundaries
    assert np.array_equal(add_gaussian_noise(y, sigma, 4).counts, noisy.counts)
    assert not np.array_equal(add_gaussian_noise(y, sigma, 5).counts, noisy.counts)


def test_rng_streams_differ_by_label() -> None:
    a = make_rng(5, "poisson").standard_normal(4)
    b = make_rng(5, "electronic").standard_normal(4)
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        make_rng(-1)


def test_reparameterization_with_zero_exponents_is_identity() -> None:
    s = _two_bin()
    out = reparameterize_known_materials(s, np.zeros(2))
    assert np.array_equal(out.weights, s.weights)
    assert out.intensity == s.intensity
    assert out is not s


def test_reparameterization_preserves_expected_counts() -> None:
    s = _two_bin()
    e = np.array([0.4, 1.3])
    out = reparameterize_known_materials(s, e)
    for t in (0.0, 0.5, 2.0):
        direct = s.intensity * float(np.sum(s.weights * np.exp(-e - s.attenuations * t)))
        assert out.intensity * attenuation_response(out, t) == pytest.approx(direct, rel=1e-12)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_reparameterize_rays_matches_single_ray_version() -> None:
    s = _two_bin()
    e = np.array([[0.0, 0.0], [0.2, 0.9], [1.5, 6.0]])
    per_ray = reparameterize_rays(s, e)
    for i in range(3):
        single = reparameterize_known_materials(s, e[i])
        assert np.allclose(per_ray.weights[i], single.weights, rtol=1e-12)
        assert per_ray.intensity[i] == pytest.approx(single.intensity, rel=1e-12)


def test_reparameterization_rejects_negative_exponents() -> None:
    with pytest.raises(ValueError):
        reparameterize_known_materials(_two_bin(), np.array([0.1, -0.1]))


def _per_ray() -> PerRaySpectrum:
    return PerRaySpectrum(
        weights=np.array([[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]]),
        attenuations=np.array([0.5, 2.0]),
        intensity=np.array([100.0, 50.0, 10.0]),
    )


def test_per_ray_spectrum_matches_row_by_row_spectra() -> None:
    window = _per_ray()
    A = SystemMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    x = np.array([0.2, 0.5])
    y = expected_counts(A, x, WindowedSpectra.single(window))
    t = A.dot(x)
    for i in range(3):
        row = Spectrum(window.weights[i], window.attenuations, float(window.intensity[i]))
        assert y.counts[i] == pytest.approx(row.intensity * attenuation_response(row, float(t[i])), rel=1e-12)
        assert window.slope(t)[i] == pytest.approx(row.slope(np.array([t[i]]))[0], rel=1e-12)


def test_per_ray_slope_bounds_and_lipschitz_weight() -> None:
    window = _per_ray()
    assert np.allclose(window.slope_bounds(3), [155.0, 55.0, 12.5])
    assert window.lipschitz_weight == pytest.approx(155.0)
    shared = Spectrum(np.array([1.0]), np.array([1.0]), 2.0)
    both = WindowedSpectra((shared, window))
    assert np.allclose(both.slope_bounds(3), [157.0, 57.0, 14.5])
    assert both.lipschitz_weight == pytest.approx(157.0)
    with pytest.raises(DimensionMismatchError):
        window.intensities(4)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"weights": np.array([[0.3, 0.6], [0.5, 0.5]]), "intensity": np.array([1.0, 1.0])},
        {"weights": np.array([[0.5, 0.5], [0.5, 0.5]]), "intensity": np.array([1.0])},
        {"weights": np.array([[0.5, 0.5], [0.5, 0.5]]), "intensity": np.array([1.0, -2.0])},
    ],
)
def test_per_ray_spectrum_validation(kwargs: dict[str, np.ndarray]) -> None:
    with pytest.raises(SpectrumValidationError):
        PerRaySpectrum(attenuations=np.array([0.5, 2.0]), **kwargs)


def test_default_spectra_windows_are_valid_and_overlap() -> None:
    base = default_spectrum(n_bins=50, intensity=1e6)
    spectra = default_spectra(intensity=1e6, n_bins=50, n_windows=3)
    assert spectra.n_windows == 3
    total = sum(w.intensity for w in spectra.windows if isinstance(w, Spectrum))
    assert total > base.intensity
    assert all(isinstance(w, Spectrum) and w.intensity < base.intensity for w in spectra.windows)


def test_spectra_from_dict_reports_window() -> None:
    data = {
        "windows": [
            {"intensity": 10.0, "weights": [1.0], "attenuations": [1.0]},
            {"intensity": 10.0, "weights": [0.2, 0.2], "attenuations": [1.0, 2.0]},
        ]
    }
    with pytest.raises(SpectrumValidationError) as excinfo:
        spectra_from_dict(data)
    assert "windows[1].weights" in str(excinfo.value)
