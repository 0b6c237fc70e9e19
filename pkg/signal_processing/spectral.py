# signal_processing/spectral.py

"""
Short-time Fourier transform of detector traces, dB spectrograms and their
gradient, and the null-space projector that keeps the interferer's signal out
of the forbidden frequency band.

Conventions:
- A trace has N = K + 1 samples and is zero-padded so that the last of the
  M = 1 + ceil(max(N - W, 0) / H) windows fits.
- Frequencies omega_l = l (W/2)/(L-1) are in bin units (0 .. Nyquist) and enter
  the transform as exp(-i 2 pi k omega_l / W); in Hz they are omega_l / (W dt).
- Complex STFT values are L x M arrays; the stacked vector form used by the
  materialized matrix F orders them window-major (index m L + l).
"""
import math
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from physics.wave_sim import SignalLike, as_samples
from utils.errors import EmptyNullspaceError, InvalidInputError, InvalidParameterError

logger = logging.getLogger("WaveAttack.Spectral")

DEFAULT_FLOOR_DB = -120.0
NULLSPACE_RTOL = 1e-10
DB_PER_LOG = 20.0 / math.log(10.0)


def hann(W: int) -> np.ndarray:
    """Symmetric von Hann window w(k) = 1/2 - 1/2 cos(2 pi k / (W - 1))."""
    if int(W) != W or W < 2:
        raise InvalidParameterError(f"Window length W={W} must be an integer >= 2.")
    k = np.arange(W)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / (W - 1))


@dataclass(frozen=True)
class StftPlan:
    window: int
    hop: int
    num_freqs: int
    dt: float
    num_samples: int

    def __post_init__(self):
        if int(self.window) != self.window or self.window < 2:
            raise InvalidParameterError(f"Window length W={self.window} must be an integer >= 2.")
        if not (1 <= self.hop <= self.window):
            raise InvalidParameterError(f"Hop H={self.hop} must satisfy 1 <= H <= W={self.window}.")
        if self.num_freqs < 2:
            raise InvalidParameterError(f"Need at least two frequencies, got L={self.num_freqs}.")
        if not (self.dt > 0.0):
            raise InvalidParameterError(f"dt={self.dt} must be positive.")
        if self.num_samples < 1:
            raise InvalidParameterError(f"num_samples={self.num_samples} must be positive.")

    @property
    def num_windows(self) -> int:
        return 1 + math.ceil(max(self.num_samples - self.window, 0) / self.hop)

    @property
    def padded_length(self) -> int:
        return (self.num_windows - 1) * self.hop + self.window

    @property
    def shape(self) -> Tuple[int, int]:
        return self.num_freqs, self.num_windows

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    @cached_property
    def frequencies(self) -> np.ndarray:
        """omega_l in bin units, uniformly spaced from 0 to W/2."""
        return np.arange(self.num_freqs) * (self.window / 2.0) / (self.num_freqs - 1)

    @cached_property
    def window_values(self) -> np.ndarray:
        return hann(self.window)

    @cached_property
    def block(self) -> np.ndarray:
        """Q[l, k] = w(k) exp(-i 2 pi k omega_l / W), the L x W per-window block."""
        k = np.arange(self.window)
        phase = np.exp(-2j * np.pi * np.outer(self.frequencies, k) / self.window)
        return phase * self.window_values[None, :]


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray
    plan: StftPlan
    floor_db: float = DEFAULT_FLOOR_DB

    def __post_init__(self):
        if self.values.shape != self.plan.shape:
            raise InvalidInputError(f"Spectrogram shape {self.values.shape} does not match plan {self.plan.shape}.")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("Spectrogram contains non-finite values.")

    @property
    def max_db(self) -> float:
        return float(self.values.max())


@dataclass(frozen=True)
class BandSelector:
    """Frequency rows whose STFT content the interferer must leave at zero."""
    rows: Tuple[int, ...]
    num_freqs: int

    def __post_init__(self):
        rows = tuple(int(r) for r in self.rows)
        if len(set(rows)) != len(rows):
            raise InvalidInputError(f"Band selector rows must be unique: {rows}.")
        if any(r < 0 or r >= self.num_freqs for r in rows):
            raise InvalidInputError(f"Band selector rows {rows} out of range [0, {self.num_freqs}).")
        object.__setattr__(self, "rows", tuple(sorted(rows)))

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class NullspaceProjector:
    """Orthonormal basis N of null([Re F~; Im F~]); P = N N^T."""
    basis: np.ndarray
    selector: BandSelector
    constraint: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return int(self.basis.shape[0])

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def residual(self, f: SignalLike) -> float:
        """||F~ f||, zero for a feasible signal (0 when unconstrained)."""
        if self.constraint is None:
            return 0.0
        return float(np.linalg.norm(self.constraint @ as_samples(f, self.dim)))


def _check_length(samples: np.ndarray, plan: StftPlan) -> None:
    if samples.shape[0] != plan.num_samples:
        raise InvalidInputError(f"Signal has {samples.shape[0]} samples, plan expects {plan.num_samples}.")


def _frames(samples: np.ndarray, plan: StftPlan) -> np.ndarray:
    padded = np.zeros(plan.padded_length)
    padded[: plan.num_samples] = samples
    return np.lib.stride_tricks.sliding_window_view(padded, plan.window)[:: plan.hop]


def stft(signal: SignalLike, plan: StftPlan) -> np.ndarray:
    """Complex L x M array z[l, m] = sum_k w(k) s[mH + k] exp(-i 2 pi k omega_l / W)."""
    samples = as_samples(signal)
    _check_length(samples, plan)
    return plan.block @ _frames(samples, plan).T


def materialize_stft_matrix(plan: StftPlan, num_samples: Optional[int] = None,
                            rows: Optional[Iterable[int]] = None) -> np.ndarray:
    """
    The matrix F with stft(s) stacked window-major equal to F @ s. Window m
    occupies rows [m L', (m+1) L') and columns [mH, mH + W) clipped to N, where
    L' is the number of selected frequency rows (all L by default).
    """
    n = plan.num_samples if num_samples is None else num_samples
    Q = plan.block if rows is None else plan.block[list(rows)]
    n_rows = Q.shape[0]
    F = np.zeros((plan.num_windows * n_rows, n), dtype=complex)
    for m in range(plan.num_windows):
        start = m * plan.hop
        stop = min(start + plan.window, n)
        if stop > start:
            F[m * n_rows:(m + 1) * n_rows, start:stop] = Q[:, : stop - start]
    return F


def _db(z: np.ndarray, floor_db: float) -> Tuple[np.ndarray, np.ndarray]:
    power = np.abs(z) ** 2
    floor_power = 10.0 ** (floor_db / 10.0)
    above = power > floor_power
    return 10.0 * np.log10(np.maximum(power, floor_power)), above


def spectrogram_db(signal: SignalLike, plan: StftPlan, floor_db: float = DEFAULT_FLOOR_DB,
                   offset: Optional[np.ndarray] = None) -> Spectrogram:
    """
    10 log10(max(|z|^2, 10^(floor_db/10))). `offset` is an additive complex
    L x M term (a fixed noise realization) applied to z before the modulus.
    """
    z = stft(signal, plan)
    if offset is not None:
        z = z + offset
    values, _ = _db(z, floor_db)
    return Spectrogram(values=values, plan=plan, floor_db=floor_db)


def spectrogram_vjp(signal: SignalLike, plan: StftPlan, upstream: np.ndarray,
                    floor_db: float = DEFAULT_FLOOR_DB, offset: Optional[np.ndarray] = None) -> np.ndarray:
    """
    upstream^T d(spectrogram)/ds. Each above-floor entry contributes
    (20/ln 10) Re(conj(z) dz/ds_n) / |z|^2; floored entries contribute nothing.
    """
    samples = as_samples(signal)
    _check_length(samples, plan)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != plan.shape:
        raise InvalidInputError(f"Upstream gradient shape {upstream.shape} does not match plan {plan.shape}.")
    z = plan.block @ _frames(samples, plan).T
    if offset is not None:
        z = z + offset
    _, above = _db(z, floor_db)
    coef = np.zeros(plan.shape)
    coef[above] = upstream[above] * DB_PER_LOG / (np.abs(z[above]) ** 2)
    frame_grads = np.real((coef * np.conj(z)).T @ plan.block)   # (M, W)

    grad = np.zeros(plan.padded_length)
    for m in range(plan.num_windows):
        grad[m * plan.hop: m * plan.hop + plan.window] += frame_grads[m]
    return grad[: plan.num_samples]


def frequencies_hz(plan: StftPlan) -> np.ndarray:
    return plan.frequencies * plan.sample_rate / plan.window


def disallowed_rows(plan: StftPlan, band_low_hz: float, band_high_hz: Optional[float] = None) -> BandSelector:
    """
    Rows the interferer may not touch: every representable frequency outside
    [band_low_hz, band_high_hz]. Upper limits above Nyquist constrain nothing.
    """
    hz = frequencies_hz(plan)
    mask = hz < band_low_hz
    if band_high_hz is not None:
        mask |= hz > band_high_hz
    rows = tuple(int(r) for r in np.flatnonzero(mask))
    logger.debug(f"Disallowed rows below {band_low_hz} Hz: {rows}.")
    return BandSelector(rows=rows, num_freqs=plan.num_freqs)


def constraint_matrix(plan: StftPlan, selector: BandSelector) -> np.ndarray:
    """[Re F~; Im F~] for the selected rows; a feasible signal f has constraint @ f = 0."""
    if selector.num_freqs != plan.num_freqs:
        raise InvalidInputError(f"Selector built for L={selector.num_freqs}, plan has L={plan.num_freqs}.")
    F_sel = materialize_stft_matrix(plan, plan.num_samples, rows=selector.rows)
    return np.vstack((F_sel.real, F_sel.imag))


def build_projector(plan: StftPlan, selector: BandSelector, tol: float = NULLSPACE_RTOL) -> NullspaceProjector:
    """
    Orthonormal null-space basis of [Re F~; Im F~] from the SVD, singular values
    below tol * sigma_max counted as zero. No selected rows gives the identity.
    """
    n = plan.num_samples
    if selector.num_freqs != plan.num_freqs:
        raise InvalidInputError(f"Selector built for L={selector.num_freqs}, plan has L={plan.num_freqs}.")
    if len(selector) == 0:
        return NullspaceProjector(basis=np.eye(n), selector=selector)

    stacked = constraint_matrix(plan, selector)
    basis = sla.null_space(stacked, rcond=tol)
    if basis.shape[1] == 0:
        raise EmptyNullspaceError(
            f"The band constraint on rows {selector.rows} leaves no admissible interferer signal."
        )
    logger.info(f"Null-space projector: {n} samples, {len(selector)} constrained rows, rank {basis.shape[1]}.")
    return NullspaceProjector(basis=basis, selector=selector, constraint=stacked)


def project(projector: NullspaceProjector, f: SignalLike) -> np.ndarray:
    """N (N^T f)."""
    x = as_samples(f, projector.dim)
    return projector.basis @ (projector.basis.T @ x)
