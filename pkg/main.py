# main.py

"""
Command-line orchestrator of the wave-propagation attack pipeline.

A detector listens to a rectangle of water through a single sensor and decides
from the spectrogram of what it hears whether an intruder's tone is
malicious. An interferer at a nearby position emits a signal, restricted to
an allowed frequency band, that is optimized to make the detector wrong.

The pipeline is split into commands that each write artifacts to the output
directory (see `utils/workspace.py`) and a `summary_<command>.json`:

1.  **mesh**: triangulates the domain.
2.  **precompute**: assembles the finite element matrices, factorizes the
    leapfrog step matrix once, performs the single adjoint solve and stores
    the Green operators of the interferer and the intruder, plus the null-space
    projector of the band constraint.
3.  **gendata**: builds noisy labelled spectrograms for every intruder tone
    (train / test / validation splits).
4.  **train**: fits the detector's classifier with early stopping on the test split.
5.  **attack**: attacks every validation example in a thread pool and writes
    the per-example report, interferer signals and before/after images.
6.  **evaluate**: accuracy table without and with the interferer.
7.  **bench**: timing table of the naive and shortcut objective/gradient.

Exit codes: 0 success, 2 configuration error, 3 missing or mismatched
artifact, 4 numeric failure, 1 anything else.
"""
import os
import sys
import time
import logging
import argparse
from datetime import datetime
from typing import Callable, Dict

import numpy as np


# Attempt to enable color support on Windows terminals
if os.name == 'nt':
    try:
        import colorama
        colorama.init()
    except ImportError:
        pass

from agents.detector import DetectorAgent, TrainingConfig
from agents.interferer import AttackConfig, AttackProblem, attack_many
from agents.intruder import SPLITS, IntruderAgent, intruder_signal
from evaluation.accuracy_table import write_accuracy_table
from evaluation.bench import run_benchmark
from physics.adjoint_green import green_for_source, precompute_adjoint_column
from physics.fem_assembly import Rectangle, assemble_all, build_rect_mesh
from physics.wave_sim import StepOperators, build_step_operators, energy_trace, leapfrog_solve
from signal_processing.spectral import build_projector, frequencies_hz
from utils import artifact_io
from utils.config_loader import PipelineConfig, build_config, derive_seed
from utils.errors import WaveAttackError
from utils.workspace import Workspace

# --- Logger Setup ---
logger = logging.getLogger("WaveAttack")

# Node count of the reference unstructured mesh of the 100 m x 100 m profile.
REFERENCE_NODE_COUNT = 11836
# Examples with before/after images and a PNG figure per attack run.
MAX_ATTACK_IMAGES = 10


# --- Helper Classes and Functions for Logging ---

class Color:
    """A class to hold ANSI color codes for colored console output."""
    RESET = "\033[0m"
    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    MAGENTA = "\033[35m"
    CYAN = "\033[36m"
    BOLD = "\033[1m"


class ColoredFormatter(logging.Formatter):
    """Colors the level name on the console only; the record itself is left untouched."""
    LOG_LEVEL_COLORS = {
        logging.DEBUG: Color.CYAN,
        logging.INFO: Color.GREEN,
        logging.WARNING: Color.YELLOW + Color.BOLD,
        logging.ERROR: Color.RED + Color.BOLD,
        logging.CRITICAL: Color.MAGENTA + Color.BOLD,
    }

    def format(self, record):
        color = self.LOG_LEVEL_COLORS.get(record.levelno, Color.RESET)
        record = logging.makeLogRecord(record.__dict__)
        record.levelname = f"{color}{record.levelname}{Color.RESET}"
        return super().format(record)


def setup_logging(logger_instance: logging.Logger, log_root: str = "run", command: str = "run") -> str:
    """Configures the logger to output to both console (INFO) and a dated file (DEBUG)."""
    # Create a directory for logs based on the current year and month
    log_dir_path = os.path.join(log_root, datetime.now().strftime("%Y-%m"))
    os.makedirs(log_dir_path, exist_ok=True)
    log_file_full_path = os.path.join(
        log_dir_path, f"waveattack_{command}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log")

    logger_instance.setLevel(logging.DEBUG)
    if logger_instance.hasHandlers():
        logger_instance.handlers.clear()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(ColoredFormatter(fmt='%(asctime)s - %(levelname)s - %(message)s',
                                                  datefmt='%Y-%m-%d %H:%M:%S'))
    logger_instance.addHandler(console_handler)

    file_handler = logging.FileHandler(log_file_full_path, encoding='utf-8')
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(
        fmt='%(asctime)s - %(levelname)s - [%(name)s:%(module)s:%(funcName)s:%(lineno)d] - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'))
    logger_instance.addHandler(file_handler)
    logger_instance.info(f"Logging initialized. Log file: {log_file_full_path}")
    return log_file_full_path


# --- Commands ---

def cmd_mesh(ws: Workspace) -> Dict:
    cfg = ws.cfg
    mesh = build_rect_mesh(Rectangle(*cfg.domain), cfg.mesh_h_m, jitter=cfg.mesh_jitter,
                           seed=derive_seed(cfg.seed, "mesh"))
    path = artifact_io.write_mesh(ws.mesh_path, mesh, ws.hash("mesh"))
    logger.info(f"Mesh: {mesh.num_nodes} nodes, {mesh.num_triangles} triangles -> {path}")
    return {"mesh_path": str(path), "nodes": mesh.num_nodes, "triangles": mesh.num_triangles,
            "boundary_edges": int(len(mesh.boundary_edges)),
            "reference_node_count": REFERENCE_NODE_COUNT,
            "node_ratio_to_reference": mesh.num_nodes / REFERENCE_NODE_COUNT}


def cmd_precompute(ws: Workspace) -> Dict:
    cfg = ws.cfg
    mesh = ws.load_mesh()
    matrices = assemble_all(mesh)
    for name, matrix in matrices._asdict().items():
        artifact_io.write_spsym(ws.matrix_path(name), matrix)
    ops = build_step_operators(mesh, cfg.c_m_per_s, ws.grid, matrices=matrices, solver=cfg.solver,
                               check_spectrum=True)
    start = time.perf_counter()
    adj = precompute_adjoint_column(ops, ws.detector_weights(mesh), ws.grid)
    adjoint_seconds = time.perf_counter() - start
    solves = ops.solve_count

    tag = ws.hash("precompute")
    greens = {}
    for source, position in (("interferer", cfg.interferer), ("intruder", cfg.intruder)):
        G = green_for_source(ops, adj, position, cfg.epsilon, source)
        greens[source] = str(artifact_io.write_green(ws.green_path(source), G, tag))

    selector = ws.selector
    projector = build_projector(ws.plan, selector, cfg.nullspace_rtol)
    artifact_io.write_projector(ws.projector_path, projector, tag)
    snapshot = _write_field_snapshot(ws, ops, tag) if cfg.field_snapshot else {}
    hz = frequencies_hz(ws.plan)
    logger.info(f"Precompute done: {solves} back-substitutions against {ops.factorization_count} factorization(s) "
                f"in {adjoint_seconds:.2f}s; projector rank {projector.rank}/{projector.dim}.")
    return {"green_paths": greens, "projector_path": str(ws.projector_path), "solve_count": solves,
            "factorization_count": ops.factorization_count, "adjoint_seconds": adjoint_seconds,
            "constrained_rows": list(selector.rows),
            "constrained_hz": [float(hz[r]) for r in selector.rows],
            "projector_rank": projector.rank, "num_samples": projector.dim,
            "matrices_dir": str(ws.matrices_dir), **snapshot}


def _write_field_snapshot(ws: Workspace, ops: StepOperators, tag: str) -> Dict:
    """Full field of the lowest intruder tone, for inspection and the energy trace."""
    cfg = ws.cfg
    freq = cfg.source_frequencies()[0]
    tone = intruder_signal(freq, ws.grid, cfg.intruder_amplitude)
    silent = np.zeros(ws.grid.num_samples)
    _, history = leapfrog_solve(ops, silent, tone, ws.sim_config, keep_history=True)
    artifact_io.write_field(ws.field_path, history, tag)
    energy = energy_trace(history, ops)
    logger.info(f"Field snapshot of the {freq:g} Hz tone -> {ws.field_path} (peak energy {energy.max():.4e}).")
    return {"field_path": str(ws.field_path), "field_frequency_hz": freq, "field_peak_energy": float(energy.max()),
            "field_final_energy": float(energy[-1])}


def cmd_gendata(ws: Workspace) -> Dict:
    cfg = ws.cfg
    green_s = ws.load_green("intruder")
    intruder = IntruderAgent(green_s, ws.plan, ws.noise_spec, cfg.threshold_hz, cfg.intruder_amplitude,
                             cfg.floor_db)
    frequencies = cfg.source_frequencies()
    per_split = {"train": cfg.train_per_freq, "test": cfg.test_per_freq, "val": cfg.val_per_freq}
    tag = ws.hash("gendata")
    counts = {}
    for split in SPLITS:
        examples = intruder.generate_split(frequencies, split, per_split[split], cfg.seed,
                                           max_workers=cfg.attack_workers)
        rows = []
        for example in examples:
            rel_path = f"{split}/{example.example_id}.wspc"
            artifact_io.write_spectrogram(ws.dataset_dir / rel_path, example.values, cfg.floor_db, tag)
            rows.append({"id": example.example_id, "frequency_hz": example.frequency_hz, "label": example.label,
                         "seed": example.seed, "path": rel_path})
        artifact_io.write_rows(ws.manifest_path(split), artifact_io.MANIFEST_FIELDS, rows)
        labels = [r["label"] for r in rows]
        counts[split] = {"total": len(rows), "malicious": sum(labels), "benign": len(labels) - sum(labels)}

    # One sample image per frequency, in the style of the training-data figure.
    for i, freq in enumerate(frequencies):
        values = intruder.noisy_spectrogram(freq, derive_seed(cfg.seed, "noise", 0, i, 0))
        stem = ws.dataset_dir / "images" / f"{int(round(freq))}hz"
        artifact_io.write_pgm(stem.with_suffix(".pgm"), values, cfg.floor_db)
        artifact_io.write_spectrogram_csv(stem.with_suffix(".csv"), values)
    return {"frequencies_hz": frequencies, "threshold_hz": cfg.threshold_hz, "splits": counts}


def cmd_train(ws: Workspace) -> Dict:
    cfg = ws.cfg
    train_set, test_set, val_set = (ws.load_split(split) for split in SPLITS)
    config = TrainingConfig(learning_rate=cfg.learning_rate, momentum=cfg.momentum, batch_size=cfg.batch_size,
                            epochs=cfg.epochs, patience=cfg.patience, seed=derive_seed(cfg.seed, "train"),
                            conv1_channels=cfg.conv1_channels, conv2_channels=cfg.conv2_channels)
    start = time.perf_counter()
    detector, log = DetectorAgent.fit(train_set, test_set, config)
    seconds = time.perf_counter() - start
    artifact_io.write_named_arrays(ws.model_path, detector.model.to_arrays(), ws.hash("train"))
    artifact_io.write_rows(ws.training_log_path, artifact_io.TRAINING_LOG_FIELDS, log.rows)
    val = detector.evaluate(val_set)
    logger.info(f"Trained in {seconds:.1f}s ({len(log.rows)} epochs, best {log.best_epoch}); "
                f"validation accuracy {val.accuracy:.4f}.")
    return {"model_path": str(ws.model_path), "epochs_run": len(log.rows), "best_epoch": log.best_epoch,
            "train_seconds": seconds, "val_accuracy": val.accuracy, "val_loss": val.mean_loss}


def cmd_attack(ws: Workspace) -> Dict:
    cfg = ws.cfg
    green_i, green_s = ws.load_green("interferer"), ws.load_green("intruder")
    projector = ws.load_projector()
    detector = ws.load_detector()
    val_set = ws.load_split("val")
    if cfg.attack_limit is not None:
        val_set = val_set[: cfg.attack_limit]
    intruder = IntruderAgent(green_s, ws.plan, ws.noise_spec, cfg.threshold_hz, cfg.intruder_amplitude,
                             cfg.floor_db)

    problems = {}
    for example in val_set:
        problems[example.example_id] = AttackProblem(
            green_i=green_i, green_s=green_s, intruder=intruder.signal(example.frequency_hz).samples,
            plan=ws.plan, projector=projector, detector=detector, label=example.label,
            noise=intruder.noise_offset(example.frequency_hz, example.seed), floor_db=cfg.floor_db)
    config = AttackConfig(max_iters=cfg.attack_max_iters, check_every=cfg.attack_check_every,
                          memory=cfg.attack_memory, mode=cfg.attack_mode,
                          initial_step_norm=cfg.attack_initial_step_norm)
    start = time.perf_counter()
    results = attack_many(problems, config, max_workers=cfg.attack_workers)
    seconds = time.perf_counter() - start

    rows, failed, residuals = [], [], []
    for example in val_set:
        result = results[example.example_id]
        if result is None:
            failed.append(example.example_id)
            continue
        rows.append({"example_id": example.example_id, "freq_hz": example.frequency_hz, "label": example.label,
                     "clean_conf": result.clean_confidence, "adv_conf": result.final_confidence,
                     "iters": result.iterations, "success": int(result.success),
                     "amp_ratio": result.amplitude_ratio})
        residuals.append(result.feasibility_residual)
        artifact_io.write_signal_csv(ws.attack_dir / "signals" / f"{example.example_id}.csv",
                                     result.f_star.samples, green_i.dt)
    artifact_io.write_rows(ws.attack_report_path, artifact_io.ATTACK_REPORT_FIELDS, rows)

    # Before/after images for the most convincing successes: confident clean
    # decision, smallest interferer amplitude.
    showcase = sorted(((example_id, r) for example_id, r in results.items()
                       if r is not None and r.success and r.iterations > 0),
                      key=lambda item: (item[1].clean_confidence < 0.95, item[1].amplitude_ratio))
    hz = frequencies_hz(ws.plan)
    for example_id, result in showcase[:MAX_ATTACK_IMAGES]:
        image_dir = ws.attack_dir / "images"
        top = max(result.clean_spectrogram.max(), result.perturbed_spectrogram.max())
        artifact_io.write_pgm(image_dir / f"{example_id}_clean.pgm", result.clean_spectrogram, cfg.floor_db, top)
        artifact_io.write_pgm(image_dir / f"{example_id}_attacked.pgm", result.perturbed_spectrogram,
                              cfg.floor_db, top)
        artifact_io.write_spectrogram_csv(image_dir / f"{example_id}_clean.csv", result.clean_spectrogram)
        artifact_io.write_spectrogram_csv(image_dir / f"{example_id}_attacked.csv", result.perturbed_spectrogram)
        artifact_io.save_figure(image_dir / f"{example_id}.png", result.clean_spectrogram,
                                result.perturbed_spectrogram, cfg.floor_db, interferer=result.f_star.samples,
                                intruder=problems[example_id].intruder, freqs_hz=hz,
                                title=f"{example_id}: true-class confidence {result.clean_confidence:.2%} -> "
                                      f"{result.final_confidence:.2%}, amplitude ratio {result.amplitude_ratio:.3g}")

    successes = sum(r["success"] for r in rows)
    logger.info(f"Attacked {len(rows)} examples in {seconds:.1f}s: {successes} misclassified, {len(failed)} failed.")
    return {"report_path": str(ws.attack_report_path), "attacked": len(rows), "misclassified": successes,
            "failed": failed, "attack_seconds": seconds, "mode": cfg.attack_mode,
            "max_feasibility_residual": max(residuals, default=0.0)}


def cmd_evaluate(ws: Workspace) -> Dict:
    return write_accuracy_table(ws)


def cmd_bench(ws: Workspace) -> Dict:
    return run_benchmark(ws, ws.cfg.bench_repetitions)


COMMANDS: Dict[str, Callable[[Workspace], Dict]] = {
    "mesh": cmd_mesh,
    "precompute": cmd_precompute,
    "gendata": cmd_gendata,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Adversarial interference against a spectrogram detector.")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", type=str, default=None, help="JSON or 'key = value' file overriding the profile")
    parser.add_argument("--out", type=str, default=None, help="output directory (default: profile's output_dir)")
    parser.add_argument("--seed", type=int, default=None, help="root seed (u64)")
    parser.add_argument("--profile", type=str, default="desk", choices=["desk", "paper"])
    parser.add_argument("--log-dir", type=str, default="run")
    return parser


def run(args: argparse.Namespace) -> int:
    setup_logging(logger, args.log_dir, args.command)
    try:
        cfg: PipelineConfig = build_config(args.profile, args.config, {"seed": args.seed})
        ws = Workspace(cfg, args.out)
        logger.info(f"Command '{args.command}' with profile '{cfg.config_name}' in {ws.root}")
        start = time.perf_counter()
        summary = COMMANDS[args.command](ws)
        summary["seconds"] = time.perf_counter() - start
        ws.write_summary(args.command, summary)
    except WaveAttackError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected failure in '{args.command}': {e}", exc_info=True)
        return 1
    return 0


def main(argv=None) -> int:
    return run(build_parser().parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
