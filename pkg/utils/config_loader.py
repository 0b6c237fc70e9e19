# utils/config_loader.py

"""
Loading and validation of pipeline configurations.

Named profiles ("desk", "paper") live in a central JSON file
(`configs/pipeline_config.json`), loaded once at import time. A run selects a profile and may
override any of its keys with a `--config` file, either JSON or line-oriented
`key = value` text with the units spelled out in the key names
(`c_m_per_s = 300`). The merged dict is validated into `PipelineConfig`.

Every artifact written by the CLI carries `config_hash(cfg)`; readers compare it
against the active configuration to refuse stale artifacts.

Seeds: one root seed; each stage derives its own with
`derive_seed(root, stage, *keys)` (numpy SeedSequence over the root seed,
a stable hash of the stage name and the integer keys):
    mesh        -> derive_seed(root, "mesh")
    gendata     -> derive_seed(root, "noise", split_index, freq_index, example_index)
    train       -> derive_seed(root, "train")
    attack      -> derive_seed(root, "attack", example_index)
"""
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from physics.fem_assembly import MAX_JITTER
from utils.errors import ConfigError

# Define the directory where configuration files are stored.
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
PROFILE_FILE = "pipeline_config.json"
HASH_LENGTH = 16


class PipelineConfig(BaseModel):
    """One flat, fully validated run configuration."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    config_name: str = "custom"
    output_dir: str = "output"
    seed: int = Field(0, ge=0, lt=2 ** 64)

    # geometry and mesh
    domain_xmin_m: float = 0.0
    domain_xmax_m: float = 10.0
    domain_ymin_m: float = 0.0
    domain_ymax_m: float = 10.0
    mesh_h_m: float = Field(0.25, gt=0)
    mesh_jitter: float = Field(0.0, ge=0, le=MAX_JITTER)

    # physics
    c_m_per_s: float = Field(300.0, gt=0)
    intruder_x_m: float = 0.5
    intruder_y_m: float = 7.5
    interferer_x_m: float = 0.975
    interferer_y_m: float = 6.875
    detector_x_m: float = 5.25
    detector_y_m: float = 1.25
    epsilon_m: Optional[float] = Field(None, gt=0)
    dt_s: float = Field(2.5e-4, gt=0)
    num_steps: int = Field(2000, ge=2)
    solver: Optional[str] = None
    field_snapshot: bool = False

    # spectrogram and band constraint
    stft_window: int = Field(64, ge=2)
    stft_hop: int = Field(64, ge=1)
    stft_num_freqs: int = Field(65, ge=2)
    floor_db: float = -120.0
    band_low_hz: float = Field(50.0, ge=0)
    band_high_hz: Optional[float] = None
    nullspace_rtol: float = Field(1e-10, gt=0)

    # intruder signals and dataset
    source_freq_min_hz: float = Field(20.0, gt=0)
    source_freq_max_hz: float = Field(400.0, gt=0)
    source_freq_step_hz: float = Field(20.0, gt=0)
    threshold_hz: float = Field(200.0, gt=0)
    intruder_amplitude: float = Field(1.0, gt=0)
    noise_kappa: float = Field(0.1, ge=0)
    noise_mode: str = "stft"
    train_per_freq: int = Field(10, ge=1)
    test_per_freq: int = Field(10, ge=1)
    val_per_freq: int = Field(10, ge=1)

    # classifier
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(60, ge=1)
    patience: int = Field(10, ge=1)
    conv1_channels: int = Field(8, ge=1)
    conv2_channels: int = Field(16, ge=1)

    # attack
    attack_mode: str = "reduced"
    attack_max_iters: int = Field(100, ge=1)
    attack_check_every: int = Field(10, ge=1)
    attack_memory: int = Field(10, ge=1)
    attack_initial_step_norm: float = Field(1.0, gt=0)
    attack_workers: int = Field(4, ge=1)
    attack_limit: Optional[int] = Field(None, ge=1)

    # benchmark
    bench_repetitions: int = Field(30, ge=1)

    @model_validator(mode="after")
    def _check_consistency(self) -> "PipelineConfig":
        if self.domain_xmax_m <= self.domain_xmin_m or self.domain_ymax_m <= self.domain_ymin_m:
            raise ValueError("domain must have positive width and height")
        if self.stft_hop > self.stft_window:
            raise ValueError(f"stft_hop={self.stft_hop} exceeds stft_window={self.stft_window}")
        for name in ("intruder", "interferer", "detector"):
            x, y = getattr(self, f"{name}_x_m"), getattr(self, f"{name}_y_m")
            if not (self.domain_xmin_m <= x <= self.domain_xmax_m and self.domain_ymin_m <= y <= self.domain_ymax_m):
                raise ValueError(f"{name} position ({x}, {y}) lies outside the domain")
        if self.source_freq_max_hz < self.source_freq_min_hz:
            raise ValueError("source_freq_max_hz is below source_freq_min_hz")
        nyquist = 0.5 / self.dt_s
        if self.source_freq_max_hz >= nyquist:
            raise ValueError(f"source frequencies must stay below Nyquist ({nyquist:g} Hz)")
        if self.band_low_hz >= nyquist:
            raise ValueError(f"band_low_hz={self.band_low_hz} leaves no representable frequency for the interferer")
        if self.band_high_hz is not None and self.band_high_hz <= self.band_low_hz:
            raise ValueError("band_high_hz must exceed band_low_hz")
        if self.noise_mode not in ("stft", "time"):
            raise ValueError(f"noise_mode must be 'stft' or 'time', got '{self.noise_mode}'")
        if self.attack_mode not in ("reduced", "projected"):
            raise ValueError(f"attack_mode must be 'reduced' or 'projected', got '{self.attack_mode}'")
        if self.attack_check_every > self.attack_max_iters:
            raise ValueError("attack_check_every exceeds attack_max_iters")
        if self.solver not in (None, "direct", "iterative"):
            raise ValueError(f"solver must be 'direct' or 'iterative', got '{self.solver}'")
        frequencies = self.source_frequencies()
        labels = [f <= self.threshold_hz for f in frequencies]
        if all(labels) or not any(labels):
            raise ValueError("threshold_hz leaves only one class among the source frequencies")
        return self

    def source_frequencies(self) -> List[float]:
        count = int(math.floor((self.source_freq_max_hz - self.source_freq_min_hz) / self.source_freq_step_hz + 1e-9)) + 1
        return [self.source_freq_min_hz + i * self.source_freq_step_hz for i in range(count)]

    @property
    def domain(self) -> Tuple[float, float, float, float]:
        return self.domain_xmin_m, self.domain_xmax_m, self.domain_ymin_m, self.domain_ymax_m

    @property
    def intruder(self) -> Tuple[float, float]:
        return self.intruder_x_m, self.intruder_y_m

    @property
    def interferer(self) -> Tuple[float, float]:
        return self.interferer_x_m, self.interferer_y_m

    @property
    def detector(self) -> Tuple[float, float]:
        return self.detector_x_m, self.detector_y_m

    @property
    def epsilon(self) -> float:
        return self.epsilon_m if self.epsilon_m is not None else 2.0 * self.mesh_h_m

    @property
    def sample_rate_hz(self) -> float:
        return 1.0 / self.dt_s


def load_profile_configs(file_path: Optional[Union[str, Path]] = None) -> List[Dict[str, Any]]:
    """
    Loads all profiles from the JSON profile list.

    Returns an empty list if the file is missing; invalid JSON is a ConfigError.
    """
    file_path = Path(file_path) if file_path else CONFIG_DIR / PROFILE_FILE
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        return []
    except json.JSONDecodeError as e:
        raise ConfigError(f"Error parsing {file_path}: {e}") from e


# Load profiles into a global variable upon module import for application-wide access.
GLOBAL_PROFILE_CONFIGS = load_profile_configs()


def get_profile_config(config_name: str) -> Optional[Dict[str, Any]]:
    """Retrieves a profile dict by its 'config_name', or None."""
    for config in GLOBAL_PROFILE_CONFIGS:
        if config.get("config_name") == config_name:
            return dict(config)
    return None


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("\"'")


def parse_key_value_text(text: str, source: str = "<text>") -> Dict[str, Any]:
    """`key = value` lines, `#` starts a comment, blank lines ignored."""
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{line}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{line_no}: empty key")
        values[key] = _parse_value(value)
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error parsing {path}: {e}") from e
    return parse_key_value_text(text, source=str(path))


def build_config(profile: str = "desk", config_path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Profile <- config file <- explicit overrides (None values are skipped)."""
    base = get_profile_config(profile)
    if base is None:
        known = [c.get("config_name") for c in GLOBAL_PROFILE_CONFIGS]
        raise ConfigError(f"Unknown profile '{profile}'. Known profiles: {known}")
    if config_path:
        base.update(read_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            base[key] = value
    try:
        return PipelineConfig(**base)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


_MESH_FIELDS = ("domain_", "mesh_", "seed")
_PHYSICS_FIELDS = _MESH_FIELDS + ("c_m_per_s", "intruder_x", "intruder_y", "interferer_x", "interferer_y",
                                  "detector_", "epsilon_m", "dt_s", "num_steps", "stft_", "floor_db",
                                  "band_", "nullspace_rtol")
_DATA_FIELDS = _PHYSICS_FIELDS + ("source_freq_", "threshold_hz", "intruder_amplitude", "noise_",
                                  "train_per_freq", "test_per_freq", "val_per_freq")
_MODEL_FIELDS = _DATA_FIELDS + ("learning_rate", "momentum", "batch_size", "epochs", "patience", "conv")

# Fields each artifact depends on; a later stage's artifacts stay valid when
# only downstream settings change.
STAGE_FIELDS = {
    "mesh": _MESH_FIELDS,
    "precompute": _PHYSICS_FIELDS,
    "gendata": _DATA_FIELDS,
    "train": _MODEL_FIELDS,
}


def config_hash(cfg: PipelineConfig, stage: Optional[str] = None) -> str:
    """sha256 of the canonical JSON of the fields `stage` depends on (all physics-relevant ones by default)."""
    payload = cfg.model_dump(exclude={"config_name", "output_dir", "attack_workers", "attack_limit",
                                      "bench_repetitions", "solver", "field_snapshot"})
    if stage is not None:
        if stage not in STAGE_FIELDS:
            raise ConfigError(f"Unknown artifact stage '{stage}'.")
        payload = {k: v for k, v in payload.items() if k.startswith(STAGE_FIELDS[stage])}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def derive_seed(root: int, stage: str, *keys: int) -> int:
    """Stage- and key-specific 63-bit seed from the root seed."""
    stage_key = int.from_bytes(hashlib.sha256(stage.encode("utf-8")).digest()[:4], "little")
    seq = np.random.SeedSequence([int(root), stage_key, *(int(k) for k in keys)])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
