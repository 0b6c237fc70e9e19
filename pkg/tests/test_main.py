import json
from pathlib import Path

import pytest

import main
from evaluation.accuracy_table import attack_statistics
from physics.fem_assembly import assemble_all
from utils import errors
from utils.artifact_io import (
    read_field, read_mesh, read_rows, read_signal_csv, read_spectrogram_csv, read_spsym,
)

TINY_CONFIG = """
# 5 x 5 cells on the desk domain, 201 samples, 16-sample windows (250 Hz rows)
mesh_h_m = 2.0
epsilon_m = 2.0
num_steps = 200
stft_window = 16
stft_hop = 16
stft_num_freqs = 9
train_per_freq = 2
test_per_freq = 1
val_per_freq = 1
epochs = 3
conv1_channels = 2
conv2_channels = 2
attack_max_iters = 2
attack_check_every = 1
attack_workers = 2
bench_repetitions = 2
"""

PIPELINE = ["mesh", "precompute", "gendata", "train", "attack", "evaluate", "bench"]


def _run(command, out, logs, config=None, *extra):
    argv = [command, "--profile", "desk", "--out", str(out), "--log-dir", str(logs)]
    if config is not None:
        argv += ["--config", str(config)]
    return main.main(argv + list(extra))


def _summary(out, command):
    return json.loads((out / f"summary_{command}.json").read_text(encoding="utf-8"))


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


def test_tiny_pipeline_end_to_end(tmp_path, tiny_config):
    out, logs = tmp_path / "out", tmp_path / "logs"
    for command in PIPELINE:
        assert _run(command, out, logs, tiny_config) == 0, command
        assert (out / f"summary_{command}.json").is_file()

    mesh = _summary(out, "mesh")
    assert mesh["nodes"] == 36 and mesh["triangles"] == 50

    precompute = _summary(out, "precompute")
    assert precompute["solve_count"] == 199
    assert precompute["factorization_count"] == 1
    assert precompute["constrained_rows"] == [0]
    assert precompute["projector_rank"] < precompute["num_samples"] == 201
    assert "field_path" not in precompute
    expected = assemble_all(read_mesh(out / "mesh.trimesh"))
    for name in ("M", "K", "S"):
        stored = read_spsym(Path(precompute["matrices_dir"]) / f"{name}.spsym")
        assert abs(stored - getattr(expected, name)).max() <= 1e-12 * abs(getattr(expected, name)).max()

    gendata = _summary(out, "gendata")
    assert gendata["splits"]["train"] == {"total": 40, "malicious": 20, "benign": 20}
    assert len(list((out / "dataset" / "images").glob("*.pgm"))) == 20
    images = sorted((out / "dataset" / "images").glob("*.csv"))
    assert len(images) == 20
    assert read_spectrogram_csv(images[0]).shape == (9, 13)

    report = read_rows(out / "attack" / "report.csv")
    assert len(report) == gendata["splits"]["val"]["total"] == 20
    assert len(list((out / "attack" / "signals").glob("*.csv"))) == 20
    samples, dt = read_signal_csv(next((out / "attack" / "signals").glob("*.csv")))
    assert samples.shape == (201,) and dt == pytest.approx(2.5e-4)
    assert _summary(out, "attack")["max_feasibility_residual"] <= 1e-8
    attack_images = out / "attack" / "images"
    assert len(list(attack_images.glob("*.csv"))) == len(list(attack_images.glob("*.pgm")))

    evaluate = _summary(out, "evaluate")
    assert 0.0 <= evaluate["accuracy_with_interferer"] <= 1.0
    assert 0.0 <= evaluate["accuracy_without_interferer"] <= 1.0
    assert evaluate["attacked"] == 20
    assert (out / "accuracy_table.md").is_file()

    bench = _summary(out, "bench")
    assert bench["objective_shortcut"]["solves_per_call"] == 0
    assert bench["gradient_shortcut"]["solves_per_call"] == 0
    assert bench["objective_naive"]["solves_per_call"] == 199
    assert bench["gradient_adjoint"]["solves_per_call"] == 2 * 199
    assert bench["speedup_ok"] is False  # two repetitions never count

    assert list(logs.glob("*/waveattack_mesh_*.log"))


def test_field_snapshot_is_written_on_request(tmp_path, tiny_config):
    out, logs = tmp_path / "out", tmp_path / "logs"
    config = tmp_path / "snapshot.cfg"
    config.write_text(tiny_config.read_text(encoding="utf-8") + "field_snapshot = true\n", encoding="utf-8")
    assert _run("mesh", out, logs, config) == 0
    assert _run("precompute", out, logs, config) == 0
    precompute = _summary(out, "precompute")
    assert precompute["field_frequency_hz"] == 20.0
    history = read_field(out / "field_intruder.wfld")
    assert history.shape == (201, 36)
    assert 0.0 < precompute["field_peak_energy"] < float("inf")


def test_invalid_config_exits_with_two(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stft_hop = 128\n", encoding="utf-8")
    assert _run("mesh", tmp_path / "out", tmp_path / "logs", bad) == 2


def test_missing_upstream_artifact_exits_with_three(tmp_path, tiny_config):
    assert _run("precompute", tmp_path / "out", tmp_path / "logs", tiny_config) == 3
    assert not (tmp_path / "out" / "summary_precompute.json").exists()


def test_stale_artifact_exits_with_three(tmp_path, tiny_config):
    out, logs = tmp_path / "out", tmp_path / "logs"
    assert _run("mesh", out, logs, tiny_config) == 0
    assert _run("precompute", out, logs, tiny_config, "--seed", "5") == 3


def test_seed_override_reaches_the_summary(tmp_path, tiny_config):
    out = tmp_path / "out"
    assert _run("mesh", out, tmp_path / "logs", tiny_config, "--seed", "5") == 0
    summary = _summary(out, "mesh")
    assert summary["command"] == "mesh" and summary["profile"] == "desk"
    assert len(summary["config_hash"]) == 16


def test_unknown_command_is_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main.main(["deploy", "--log-dir", str(tmp_path)])


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The whole desk profile, run once for the acceptance checks below."""
    root = tmp_path_factory.mktemp("desk")
    out, logs = root / "out", root / "logs"
    for command in PIPELINE:
        assert _run(command, out, logs) == 0, command
    return out


@pytest.mark.slow
def test_desk_profile_precompute(desk_run):
    assert _summary(desk_run, "mesh")["nodes"] == 41 * 41
    precompute = _summary(desk_run, "precompute")
    assert precompute["solve_count"] == 1999
    assert precompute["factorization_count"] == 1


@pytest.mark.slow
def test_desk_detector_is_accurate_on_clean_signals(desk_run):
    assert _summary(desk_run, "evaluate")["accuracy_without_interferer"] >= 0.95


@pytest.mark.slow
def test_desk_attack_flips_nearly_every_correct_decision(desk_run):
    report = read_rows(desk_run / "attack" / "report.csv")
    stats = attack_statistics(report)
    assert stats["flip_rate"] >= 0.9
    assert all(int(r["iters"]) <= 100 for r in report)


@pytest.mark.slow
def test_desk_attack_has_a_confident_decision_reversed_by_a_weaker_signal(desk_run):
    report = read_rows(desk_run / "attack" / "report.csv")
    showcase = [r for r in report if float(r["clean_conf"]) >= 0.95 and float(r["adv_conf"]) < 0.05
                and float(r["amp_ratio"]) < 1.0]
    assert showcase
    assert list((desk_run / "attack" / "images").glob("*_attacked.pgm"))


@pytest.mark.slow
def test_desk_shortcut_is_ten_times_faster(desk_run):
    bench = _summary(desk_run, "bench")
    assert bench["repetitions"] >= 30
    assert bench["objective_speedup"]["value"] >= 10.0
    assert bench["gradient_speedup"]["value"] >= 10.0
    assert bench["speedup_ok"] is True


@pytest.mark.parametrize("error, code", [
    (errors.WaveAttackError, 1),
    (errors.ConfigError, 2),
    (errors.InvalidParameterError, 2),
    (errors.OutOfDomainError, 2),
    (errors.SingleClassDatasetError, 2),
    (errors.MissingArtifactError, 3),
    (errors.ArtifactMismatchError, 3),
    (errors.NumericError, 4),
    (errors.EmptyNullspaceError, 4),
])
def test_error_classes_carry_their_exit_code(error, code, tmp_path, monkeypatch):
    def failing(ws):
        raise error("boom")

    monkeypatch.setitem(main.COMMANDS, "mesh", failing)
    assert main.main(["mesh", "--out", str(tmp_path / "out"), "--log-dir", str(tmp_path / "logs")]) == code
