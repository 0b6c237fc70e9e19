import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from signal_processing import spectral
from signal_processing.spectral import (
    BandSelector, StftPlan, build_projector, disallowed_rows, frequencies_hz, hann, materialize_stft_matrix,
    project, spectrogram_db, spectrogram_vjp, stft,
)
from utils.errors import EmptyNullspaceError, InvalidInputError, InvalidParameterError


def test_hann_window():
    w = hann(64)
    assert w[0] == pytest.approx(0.0, abs=1e-15)
    assert w[-1] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)
    with pytest.raises(InvalidParameterError):
        hann(1)


@pytest.mark.parametrize("num_samples, expected", [(100, 2), (64, 1), (10, 1), (2001, 32), (6001, 94)])
def test_window_count(num_samples, expected):
    plan = StftPlan(window=64, hop=64, num_freqs=65, dt=1e-3, num_samples=num_samples)
    assert plan.num_windows == expected


@settings(max_examples=100)
@given(st.integers(2, 128), st.integers(1, 128), st.integers(1, 5000))
def test_windows_cover_the_signal_exactly(window, hop, num_samples):
    hop = min(hop, window)
    plan = StftPlan(window=window, hop=hop, num_freqs=3, dt=1.0, num_samples=num_samples)
    M = plan.num_windows
    assert plan.padded_length >= num_samples
    assert M == 1 or (M - 2) * hop + window < num_samples


def test_plan_validation():
    with pytest.raises(InvalidParameterError):
        StftPlan(window=8, hop=9, num_freqs=5, dt=0.1, num_samples=20)
    with pytest.raises(InvalidParameterError):
        StftPlan(window=8, hop=4, num_freqs=1, dt=0.1, num_samples=20)


def test_stft_equals_the_materialized_matrix(small_plan, rng):
    s = rng.standard_normal(small_plan.num_samples)
    z = stft(s, small_plan)
    F = materialize_stft_matrix(small_plan)
    assert z.shape == small_plan.shape
    np.testing.assert_allclose(F @ s, z.T.ravel(), rtol=1e-12, atol=1e-12)


def test_pure_tone_peaks_in_its_row():
    plan = StftPlan(window=64, hop=32, num_freqs=33, dt=1.0 / 2000.0, num_samples=1024)
    hz = frequencies_hz(plan)
    assert hz[8] == pytest.approx(250.0)
    t = np.arange(plan.num_samples) * plan.dt
    values = spectrogram_db(np.sin(2 * np.pi * 250.0 * t), plan).values
    assert np.all(np.argmax(values[:, 1:-1], axis=0) == 8)


def test_silence_sits_on_the_floor(small_plan):
    spec = spectrogram_db(np.zeros(small_plan.num_samples), small_plan, floor_db=-120.0)
    np.testing.assert_array_equal(spec.values, -120.0)
    grad = spectrogram_vjp(np.zeros(small_plan.num_samples), small_plan, np.ones(small_plan.shape))
    np.testing.assert_array_equal(grad, 0.0)


@pytest.mark.parametrize("with_offset", [False, True])
def test_vjp_matches_finite_differences(small_plan, rng, with_offset):
    s = rng.standard_normal(small_plan.num_samples)
    upstream = rng.standard_normal(small_plan.shape)
    offset = 0.3 * (rng.standard_normal(small_plan.shape) + 1j * rng.standard_normal(small_plan.shape)) \
        if with_offset else None

    def scalar(x):
        return float(np.sum(upstream * spectrogram_db(x, small_plan, offset=offset).values))

    grad = spectrogram_vjp(s, small_plan, upstream, offset=offset)
    direction = rng.standard_normal(small_plan.num_samples)
    h = 1e-6
    numeric = (scalar(s + h * direction) - scalar(s - h * direction)) / (2 * h)
    assert grad @ direction == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def test_vjp_checks_the_upstream_shape(small_plan):
    with pytest.raises(InvalidInputError):
        spectrogram_vjp(np.ones(small_plan.num_samples), small_plan, np.ones((2, 2)))
    with pytest.raises(InvalidInputError):
        stft(np.ones(small_plan.num_samples + 1), small_plan)


def test_disallowed_rows_cover_both_band_edges():
    plan = StftPlan(window=64, hop=64, num_freqs=33, dt=1.0 / 2000.0, num_samples=640)
    # rows are 31.25 Hz apart
    below = disallowed_rows(plan, band_low_hz=50.0)
    assert below.rows == (0, 1)
    both = disallowed_rows(plan, band_low_hz=50.0, band_high_hz=500.0)
    assert both.rows == (0, 1) + tuple(range(17, 33))
    above_nyquist = disallowed_rows(plan, band_low_hz=50.0, band_high_hz=5000.0)
    assert above_nyquist.rows == (0, 1)


def test_band_selector_validation():
    with pytest.raises(InvalidInputError):
        BandSelector(rows=(1, 1), num_freqs=5)
    with pytest.raises(InvalidInputError):
        BandSelector(rows=(5,), num_freqs=5)
    assert BandSelector(rows=(3, 0), num_freqs=5).rows == (0, 3)


def test_projector_spans_the_admissible_signals(small_plan, small_projector, rng):
    N = small_projector.basis
    F_sel = materialize_stft_matrix(small_plan, rows=small_projector.selector.rows)
    assert small_projector.selector.rows == (0, 1)
    np.testing.assert_allclose(N.T @ N, np.eye(small_projector.rank), atol=1e-12)
    assert np.abs(F_sel @ N).max() <= 1e-9 * np.linalg.norm(F_sel, 2)

    f = rng.standard_normal(small_plan.num_samples)
    pf = project(small_projector, f)
    np.testing.assert_allclose(project(small_projector, pf), pf, atol=1e-12)
    assert small_projector.residual(pf) <= 1e-8 * np.linalg.norm(f)
    assert abs((f - pf) @ pf) <= 1e-10 * (f @ f)
    np.testing.assert_allclose(small_projector.matrix() @ f, pf, atol=1e-12)


def test_projected_signal_has_no_content_in_the_band(small_plan, small_projector, rng):
    pf = project(small_projector, rng.standard_normal(small_plan.num_samples))
    z = stft(pf, small_plan)
    assert np.abs(z[:2]).max() <= 1e-8 * np.abs(z).max()


def test_no_constraint_gives_the_identity(small_plan):
    projector = build_projector(small_plan, BandSelector(rows=(), num_freqs=small_plan.num_freqs))
    assert projector.rank == projector.dim == small_plan.num_samples
    assert projector.residual(np.ones(small_plan.num_samples)) == 0.0


def test_empty_nullspace_is_reported(small_plan, monkeypatch):
    monkeypatch.setattr(spectral.sla, "null_space", lambda a, rcond: np.zeros((a.shape[1], 0)))
    with pytest.raises(EmptyNullspaceError):
        build_projector(small_plan, disallowed_rows(small_plan, band_low_hz=3.0))


def test_selector_must_match_the_plan(small_plan):
    with pytest.raises(InvalidInputError):
        build_projector(small_plan, BandSelector(rows=(0,), num_freqs=small_plan.num_freqs + 1))


def test_db_conversion_constant():
    assert spectral.DB_PER_LOG == pytest.approx(20.0 / math.log(10.0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), decades=st.integers(1, 3))
def test_ten_times_the_amplitude_adds_twenty_db(seed, decades):
    plan = StftPlan(window=8, hop=4, num_freqs=5, dt=0.05, num_samples=41)
    s = np.random.default_rng(seed).standard_normal(plan.num_samples)
    base = spectrogram_db(s, plan).values
    louder = spectrogram_db(10.0 ** decades * s, plan).values
    above = base > spectral.DEFAULT_FLOOR_DB
    assert above.any()
    np.testing.assert_allclose(louder[above] - base[above], 20.0 * decades, rtol=0.0, atol=1e-9)
