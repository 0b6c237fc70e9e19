import json

import pytest
from hypothesis import given, settings, strategies as st

from utils.config_loader import (
    GLOBAL_PROFILE_CONFIGS, PipelineConfig, build_config, config_hash, derive_seed, get_profile_config,
    load_profile_configs, parse_key_value_text, read_config_file,
)
from utils.errors import ConfigError


@pytest.mark.parametrize("profile", ["desk", "paper"])
def test_profiles_validate(profile):
    cfg = build_config(profile)
    assert cfg.config_name == profile
    assert cfg.stft_hop <= cfg.stft_window


def test_desk_profile_values():
    cfg = build_config("desk")
    frequencies = cfg.source_frequencies()
    assert len(frequencies) == 20
    assert frequencies[0] == 20.0 and frequencies[-1] == pytest.approx(400.0)
    assert sum(f <= cfg.threshold_hz for f in frequencies) == 10
    assert cfg.epsilon == pytest.approx(2.0 * cfg.mesh_h_m)
    assert cfg.sample_rate_hz == pytest.approx(4000.0)


def test_paper_profile_values():
    cfg = build_config("paper")
    assert len(cfg.source_frequencies()) == 80
    assert cfg.sample_rate_hz == pytest.approx(6000.0)
    assert cfg.num_steps * cfg.dt_s == pytest.approx(1.0)


def test_unknown_profile():
    assert get_profile_config("lab") is None
    with pytest.raises(ConfigError, match="Unknown profile"):
        build_config("lab")


def test_profile_lookup_returns_a_copy():
    first = get_profile_config("desk")
    first["seed"] = 99
    assert get_profile_config("desk")["seed"] == 0
    assert {c["config_name"] for c in GLOBAL_PROFILE_CONFIGS} >= {"desk", "paper"}


def test_key_value_parsing():
    text = """
    # comment line
    num_steps = 200   # trailing comment
    solver = direct
    band_high_hz = none
    mesh_jitter = 0.01
    flag = TRUE
    name = "quoted"
    """
    values = parse_key_value_text(text)
    assert values == {"num_steps": 200, "solver": "direct", "band_high_hz": None, "mesh_jitter": 0.01,
                      "flag": True, "name": "quoted"}


@pytest.mark.parametrize("text", ["num_steps 200", "= 3"])
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        parse_key_value_text(text)


def test_file_overrides_the_profile(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text("num_steps = 300\nnoise_kappa = 0\n", encoding="utf-8")
    cfg = build_config("desk", path, {"seed": 7, "epochs": None})
    assert cfg.num_steps == 300
    assert cfg.noise_kappa == 0.0
    assert cfg.seed == 7
    assert cfg.epochs == 60


def test_json_config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({"num_steps": 123}), encoding="utf-8")
    assert read_config_file(path) == {"num_steps": 123}
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config_file(path)
    with pytest.raises(ConfigError, match="not found"):
        read_config_file(tmp_path / "missing.cfg")


def test_profile_file_errors(tmp_path):
    assert load_profile_configs(tmp_path / "absent.json") == []
    broken = tmp_path / "broken.json"
    broken.write_text("[{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_profile_configs(broken)


@pytest.mark.parametrize("overrides", [
    {"unknown_key": 1},
    {"stft_hop": 128},
    {"mesh_h_m": 0.0},
    {"detector_x_m": 50.0},
    {"threshold_hz": 1000.0},
    {"source_freq_max_hz": 2500.0},
    {"band_low_hz": 5000.0},
    {"band_high_hz": 10.0},
    {"noise_mode": "pink"},
    {"attack_mode": "greedy"},
    {"attack_check_every": 200},
    {"solver": "gmres"},
    {"mesh_jitter": 0.5},
])
def test_invalid_settings_are_config_errors(overrides):
    with pytest.raises(ConfigError):
        build_config("desk", overrides=overrides)


def test_config_is_frozen():
    cfg = build_config("desk")
    with pytest.raises(Exception):
        cfg.seed = 3


def test_stage_hashes_follow_dependencies():
    base = build_config("desk")
    more_epochs = build_config("desk", overrides={"epochs": 5})
    finer_mesh = build_config("desk", overrides={"mesh_h_m": 0.2})
    more_attack = build_config("desk", overrides={"attack_max_iters": 50})
    workers = build_config("desk", overrides={"attack_workers": 1})
    snapshot = build_config("desk", overrides={"field_snapshot": True})

    for stage in ("mesh", "precompute", "gendata"):
        assert config_hash(more_epochs, stage) == config_hash(base, stage)
    assert config_hash(more_epochs, "train") != config_hash(base, "train")
    for stage in ("mesh", "precompute", "gendata", "train"):
        assert config_hash(finer_mesh, stage) != config_hash(base, stage)
        assert config_hash(more_attack, stage) == config_hash(base, stage)
    assert config_hash(more_attack) != config_hash(base)
    assert config_hash(workers) == config_hash(base)
    assert config_hash(snapshot) == config_hash(base)
    assert len(config_hash(base)) == 16
    with pytest.raises(ConfigError):
        config_hash(base, "evaluate")


def test_noise_settings_do_not_touch_the_physics_hash():
    base = build_config("desk")
    noisier = build_config("desk", overrides={"noise_kappa": 0.3})
    assert config_hash(noisier, "precompute") == config_hash(base, "precompute")
    assert config_hash(noisier, "gendata") != config_hash(base, "gendata")


@settings(max_examples=50)
@given(st.integers(0, 2 ** 63), st.sampled_from(["mesh", "noise", "train", "attack"]),
       st.lists(st.integers(0, 1000), max_size=3))
def test_derived_seeds_are_stable_and_in_range(root, stage, keys):
    seed = derive_seed(root, stage, *keys)
    assert seed == derive_seed(root, stage, *keys)
    assert 0 <= seed < 2 ** 63


def test_derived_seeds_separate_stages_and_keys():
    seeds = {derive_seed(0, "noise", 0, i, e) for i in range(10) for e in range(10)}
    assert len(seeds) == 100
    assert derive_seed(0, "mesh") != derive_seed(0, "train")
    assert derive_seed(0, "train") != derive_seed(1, "train")


def test_defaults_match_the_model():
    cfg = PipelineConfig()
    assert cfg.floor_db == -120.0
    assert cfg.domain == (0.0, 10.0, 0.0, 10.0)
    assert cfg.epsilon == pytest.approx(0.5)
