import numpy as np
import pytest

from physics.wave_sim import TimeGrid
from signal_processing.noise_band import (
    NoiseSpec, band_rms, band_sigmas, corrupt_stft, sample_time_noise, stft_noise,
)
from signal_processing.spectral import stft
from utils.errors import InvalidInputError, InvalidParameterError


def test_noise_spec_validation():
    with pytest.raises(InvalidParameterError):
        NoiseSpec(kappa=-0.1)
    with pytest.raises(InvalidParameterError):
        NoiseSpec(kappa=float("nan"))
    with pytest.raises(InvalidParameterError):
        NoiseSpec(mode="pink")
    with pytest.raises(InvalidParameterError):
        NoiseSpec(seed=-1)
    spec = NoiseSpec(kappa=0.2, seed=3, mode="time").with_seed(9)
    assert (spec.kappa, spec.seed, spec.mode) == (0.2, 9, "time")


def test_band_rms_matches_the_stft(small_plan, rng):
    s = rng.standard_normal(small_plan.num_samples)
    z = stft(s, small_plan)
    expected = np.sqrt((np.abs(z) ** 2).mean(axis=1))
    np.testing.assert_allclose(band_rms(s, small_plan), expected, rtol=1e-12)
    np.testing.assert_array_equal(band_rms(np.zeros(small_plan.num_samples), small_plan), 0.0)


def test_zero_gain_leaves_the_stft_unchanged(small_plan, rng):
    z = stft(rng.standard_normal(small_plan.num_samples), small_plan)
    out = corrupt_stft(z, NoiseSpec(kappa=0.0, seed=4), np.ones(small_plan.num_freqs))
    np.testing.assert_array_equal(out, z)
    assert out is not z


def test_same_seed_same_noise():
    sigmas = np.array([1.0, 0.5, 2.0])
    a = stft_noise(NoiseSpec(seed=11), (3, 7), sigmas)
    b = stft_noise(NoiseSpec(seed=11), (3, 7), sigmas)
    c = stft_noise(NoiseSpec(seed=12), (3, 7), sigmas)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rows_do_not_depend_on_the_number_of_rows():
    sigmas = np.array([1.0, 0.5, 2.0, 0.1, 3.0])
    full = stft_noise(NoiseSpec(seed=2), (5, 6), sigmas)
    head = stft_noise(NoiseSpec(seed=2), (3, 6), sigmas[:3])
    np.testing.assert_array_equal(full[:3], head)


def test_silent_rows_get_no_noise():
    noise = stft_noise(NoiseSpec(seed=2), (3, 6), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(noise[[0, 2]], 0.0)
    assert np.all(noise[1] != 0.0)


def test_empirical_spread_follows_kappa_times_rms():
    z = np.zeros((1, 20_000), dtype=complex)
    out = corrupt_stft(z, NoiseSpec(kappa=0.5, seed=1), np.array([4.0]))
    assert np.std(out.real) == pytest.approx(2.0, rel=0.03)
    assert np.std(out.imag) == pytest.approx(2.0, rel=0.03)
    assert abs(np.corrcoef(out.real[0], out.imag[0])[0, 1]) < 0.03


def test_shape_checks(small_plan, grid):
    with pytest.raises(InvalidInputError):
        stft_noise(NoiseSpec(), (3, 4), np.ones(2))
    with pytest.raises(InvalidInputError):
        corrupt_stft(np.zeros(4), NoiseSpec(), np.ones(1))
    with pytest.raises(InvalidInputError):
        sample_time_noise(NoiseSpec(), small_plan, TimeGrid(grid.dt, grid.num_steps + 1),
                          np.ones(small_plan.num_freqs))


def test_time_mode_divides_by_the_coherent_gain(small_plan):
    rms = np.arange(1.0, small_plan.num_freqs + 1.0)
    stft_sigmas = band_sigmas(rms, NoiseSpec(kappa=0.3))
    time_sigmas = band_sigmas(rms, NoiseSpec(kappa=0.3, mode="time"), small_plan)
    gain = small_plan.window_values.sum() / 2.0
    np.testing.assert_allclose(time_sigmas * gain, stft_sigmas, rtol=1e-12)
    with pytest.raises(InvalidInputError):
        band_sigmas(rms, NoiseSpec(mode="time"))


def test_time_noise_in_one_band_peaks_in_that_row(small_plan, grid):
    # Row 2 sits at 5 Hz: exactly two periods per window.
    rms = np.zeros(small_plan.num_freqs)
    rms[2] = 1.0
    eta = sample_time_noise(NoiseSpec(kappa=1.0, seed=8), small_plan, grid, rms)
    assert eta.dt == grid.dt
    magnitude = np.abs(stft(eta, small_plan))
    # the last window runs into zero padding
    assert np.all(np.argmax(magnitude[:, :-1], axis=0) == 2)


def test_cosine_only_noise_agrees_at_time_zero(small_plan, grid):
    rms = np.ones(small_plan.num_freqs)
    spec = NoiseSpec(kappa=0.5, seed=21)
    full = sample_time_noise(spec, small_plan, grid, rms)
    cosine = sample_time_noise(spec, small_plan, grid, rms, quadrature=False)
    assert full.samples[0] == pytest.approx(cosine.samples[0], rel=1e-12)
    assert not np.allclose(full.samples, cosine.samples)
