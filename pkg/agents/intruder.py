# agents/intruder.py
"""
Agent: IntruderAgent
Purpose:
  Produces what the detector hears from potential intruders: pure tones
  g(t) = A sin(2 pi f t) emitted at the intruder's position, propagated to the
  detector through the intruder's Green operator, and corrupted with
  band-limited noise. Builds the labelled spectrogram datasets the detector is
  trained, tested and validated on.

Labels:
  A tone with frequency <= threshold is malicious (1), anything above is benign (0).

Input:
  - GreenOperator of the intruder source, StftPlan, NoiseSpec, threshold.
Output:
  - Signals, noise realizations (as STFT-domain offsets) and LabeledExample lists.

Noise seeds: example e of frequency index i in split s uses
derive_seed(root, "noise", s, i, e), so splits never share a realization and
any example can be regenerated on its own (the attack relies on this).
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from agents.detector import LabeledExample
from physics.adjoint_green import GreenOperator, apply_green
from physics.wave_sim import Signal, TimeGrid
from signal_processing.noise_band import NoiseSpec, band_rms, sample_time_noise, stft_noise
from signal_processing.spectral import DEFAULT_FLOOR_DB, StftPlan, spectrogram_db, stft
from utils.config_loader import derive_seed

logger = logging.getLogger("WaveAttack.Intruder")

SPLITS = ("train", "test", "val")


def intruder_signal(frequency_hz: float, grid: TimeGrid, amplitude: float = 1.0) -> Signal:
    """A sin(2 pi f t_k), k = 0..K."""
    return Signal(amplitude * np.sin(2.0 * np.pi * frequency_hz * grid.times), grid.dt)


def label_for(frequency_hz: float, threshold_hz: float) -> int:
    return 1 if frequency_hz <= threshold_hz else 0


@dataclass(frozen=True)
class ExampleSpec:
    """Everything needed to regenerate one dataset example."""
    example_id: str
    split: str
    frequency_hz: float
    label: int
    seed: int


class IntruderAgent:
    def __init__(self, green_s: GreenOperator, plan: StftPlan, noise: NoiseSpec, threshold_hz: float,
                 amplitude: float = 1.0, floor_db: float = DEFAULT_FLOOR_DB, apply_method: str = "direct"):
        self.green_s = green_s
        self.plan = plan
        self.noise = noise
        self.threshold_hz = threshold_hz
        self.amplitude = amplitude
        self.floor_db = floor_db
        self.apply_method = apply_method
        self.grid = green_s.grid
        self._clean_cache: Dict[float, Tuple[Signal, np.ndarray]] = {}
        self._cache_lock = threading.Lock()

    def signal(self, frequency_hz: float) -> Signal:
        return intruder_signal(frequency_hz, self.grid, self.amplitude)

    def clean_received(self, frequency_hz: float) -> Tuple[Signal, np.ndarray]:
        """Noiseless detector trace of the tone and its per-band RMS (cached per frequency)."""
        with self._cache_lock:
            cached = self._clean_cache.get(frequency_hz)
        if cached is None:
            trace = apply_green(self.green_s, self.signal(frequency_hz), method=self.apply_method)
            computed = (trace, band_rms(trace, self.plan))
            with self._cache_lock:
                # first writer wins so every caller shares one trace
                cached = self._clean_cache.setdefault(frequency_hz, computed)
        return cached

    def noise_offset(self, frequency_hz: float, seed: int) -> np.ndarray:
        """The complex L x M noise term added to the STFT of the received signal."""
        _, rms = self.clean_received(frequency_hz)
        spec = self.noise.with_seed(seed)
        if spec.kappa == 0.0:
            return np.zeros(self.plan.shape, dtype=complex)
        if spec.mode == "stft":
            return stft_noise(spec, self.plan.shape, spec.kappa * rms)
        eta = sample_time_noise(spec, self.plan, self.grid, rms)
        return stft(eta, self.plan)

    def noisy_spectrogram(self, frequency_hz: float, seed: int) -> np.ndarray:
        trace, _ = self.clean_received(frequency_hz)
        offset = self.noise_offset(frequency_hz, seed)
        return spectrogram_db(trace, self.plan, self.floor_db, offset=offset).values

    def example_specs(self, frequencies: Sequence[float], split: str, per_freq: int,
                      root_seed: int) -> List[ExampleSpec]:
        split_index = SPLITS.index(split)
        specs = []
        for i, freq in enumerate(frequencies):
            for e in range(per_freq):
                specs.append(ExampleSpec(
                    example_id=f"{split}-{i:03d}-{e:03d}",
                    split=split,
                    frequency_hz=float(freq),
                    label=label_for(freq, self.threshold_hz),
                    seed=derive_seed(root_seed, "noise", split_index, i, e),
                ))
        return specs

    def build_example(self, spec: ExampleSpec) -> LabeledExample:
        return LabeledExample(values=self.noisy_spectrogram(spec.frequency_hz, spec.seed), label=spec.label,
                              frequency_hz=spec.frequency_hz, example_id=spec.example_id, seed=spec.seed)

    def generate_split(self, frequencies: Sequence[float], split: str, per_freq: int, root_seed: int,
                       max_workers: int = 4, show_progress: bool = True) -> List[LabeledExample]:
        """
        One noisy spectrogram per (frequency, example index). Examples are
        built concurrently and returned in (frequency, index) order.
        """
        specs = self.example_specs(frequencies, split, per_freq, root_seed)
        labels = [s.label for s in specs]
        if labels.count(0) != labels.count(1):
            logger.warning(f"Split '{split}' is unbalanced: {labels.count(1)} malicious vs {labels.count(0)} benign.")
        for freq in frequencies:
            self.clean_received(float(freq))

        examples: List[Optional[LabeledExample]] = [None] * len(specs)
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            future_to_index = {executor.submit(self.build_example, spec): idx for idx, spec in enumerate(specs)}
            for future in tqdm(as_completed(future_to_index), total=len(specs), desc=f"Generating {split}",
                               disable=not show_progress):
                idx = future_to_index[future]
                examples[idx] = future.result()
        logger.info(f"Split '{split}': {len(examples)} examples over {len(frequencies)} frequencies.")
        return examples
