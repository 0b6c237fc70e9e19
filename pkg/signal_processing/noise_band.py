# signal_processing/noise_band.py

"""
Band-limited measurement noise whose strength in each STFT band follows the
RMS of the clean received signal in that band: sigma_l = kappa * rms_l.

Two realizations:
- "stft": add A + B i to every STFT entry (l, m), A, B ~ N(0, sigma_l^2).
- "time": eta(t) = sum_l A_l cos(2 pi f_l t) + B_l sin(2 pi f_l t), with
  sigma_l divided by the window's coherent gain (sum w)/2 so that a band's
  STFT magnitude matches what kappa means in the "stft" mode.

Stream splitting: frequency row l draws from numpy.random.default_rng([seed, l]);
in "stft" mode that stream yields an (M, 2) block of standard normals, column 0
real and column 1 imaginary, row m for window m. Rows are therefore
independent of each other and of L, and can be generated in any order.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from physics.wave_sim import Signal, SignalLike, TimeGrid
from signal_processing.spectral import StftPlan, frequencies_hz, stft
from utils.errors import InvalidInputError, InvalidParameterError

logger = logging.getLogger("WaveAttack.Noise")

NOISE_MODES = ("stft", "time")


@dataclass(frozen=True)
class NoiseSpec:
    kappa: float = 0.1
    seed: int = 0
    mode: str = "stft"

    def __post_init__(self):
        if not (self.kappa >= 0.0):
            raise InvalidParameterError(f"Noise gain kappa={self.kappa} must be non-negative.")
        if self.mode not in NOISE_MODES:
            raise InvalidParameterError(f"Unknown noise mode '{self.mode}', expected one of {NOISE_MODES}.")
        if self.seed < 0:
            raise InvalidParameterError(f"Noise seed must be non-negative, got {self.seed}.")

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(kappa=self.kappa, seed=seed, mode=self.mode)


def band_rms(signal: SignalLike, plan: StftPlan) -> np.ndarray:
    """sqrt(mean over windows of |stft|^2), one value per frequency row."""
    z = stft(signal, plan)
    return np.sqrt(np.mean(np.abs(z) ** 2, axis=1))


def band_sigmas(rms: np.ndarray, spec: NoiseSpec, plan: Optional[StftPlan] = None) -> np.ndarray:
    """Per-band standard deviations for the NoiseSpec's mode."""
    sigma = spec.kappa * np.asarray(rms, dtype=float)
    if spec.mode == "time":
        if plan is None:
            raise InvalidInputError("Time-domain noise needs the STFT plan to convert band levels.")
        sigma = sigma * 2.0 / plan.window_values.sum()
    return sigma


def _row_stream(seed: int, row: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(row)])


def stft_noise(spec: NoiseSpec, shape, sigmas: np.ndarray) -> np.ndarray:
    """The complex L x M noise term alone."""
    L, M = shape
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.shape != (L,):
        raise InvalidInputError(f"Need one sigma per frequency row ({L}), got {sigmas.shape}.")
    noise = np.zeros((L, M), dtype=complex)
    for row in range(L):
        if sigmas[row] == 0.0:
            continue
        draws = _row_stream(spec.seed, row).standard_normal((M, 2))
        noise[row] = sigmas[row] * (draws[:, 0] + 1j * draws[:, 1])
    return noise


def corrupt_stft(z: np.ndarray, spec: NoiseSpec, rms: np.ndarray) -> np.ndarray:
    """z plus independent complex Gaussian noise with per-component variance (kappa rms_l)^2."""
    z = np.asarray(z)
    if z.ndim != 2:
        raise InvalidInputError(f"STFT values must be an L x M array, got shape {z.shape}.")
    if spec.kappa == 0.0:
        return z.copy()
    sigmas = spec.kappa * np.asarray(rms, dtype=float)
    return z + stft_noise(spec, z.shape, sigmas)


def sample_time_noise(spec: NoiseSpec, plan: StftPlan, grid: TimeGrid, rms: np.ndarray,
                      quadrature: bool = True) -> Signal:
    """
    One realization of eta(t_k). `quadrature=False` drops the sine terms
    (B_l = 0), leaving a pure cosine sum.
    """
    if grid.num_samples != plan.num_samples:
        raise InvalidInputError(f"Plan covers {plan.num_samples} samples, grid has {grid.num_samples}.")
    time_spec = NoiseSpec(kappa=spec.kappa, seed=spec.seed, mode="time")
    sigmas = band_sigmas(rms, time_spec, plan)
    t = grid.times
    hz = frequencies_hz(plan)
    eta = np.zeros(grid.num_samples)
    for row in np.flatnonzero(sigmas):
        A, B = sigmas[row] * _row_stream(spec.seed, row).standard_normal(2)
        phase = 2.0 * np.pi * hz[row] * t
        eta += A * np.cos(phase)
        if quadrature:
            eta += B * np.sin(phase)
    return Signal(eta, grid.dt)
