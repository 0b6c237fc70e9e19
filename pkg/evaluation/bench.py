# evaluation/bench.py

"""
Wall-clock comparison of the two ways to evaluate the attack objective and
its gradient for one validation example:

    naive     full leapfrog solve for J; forward + adjoint time loops for grad J
    shortcut  precomputed Green operators (convolutions only, no sparse solve)

Each path is timed over `repetitions` calls on the same random feasible f.
The table reports the mean time, the spread (std/mean), the sparse solves per
call and the speedup of the shortcut; the summary flags whether both speedups
reach MIN_SPEEDUP over at least MIN_REPETITIONS calls.

Run standalone after `precompute`, `gendata` and `train`:
    python -m evaluation.bench --profile desk [--config FILE] [--out DIR] [--repetitions N]
"""
import argparse
import json
import logging
import sys
import time
from typing import Callable, Dict, List

import numpy as np
from tabulate import tabulate
from tqdm import tqdm

from agents.interferer import AttackProblem, NaiveEvaluator, gradient, objective
from agents.intruder import IntruderAgent
from physics.wave_sim import StepOperators
from signal_processing.spectral import project
from utils.config_loader import build_config, derive_seed
from utils.errors import WaveAttackError
from utils.workspace import Workspace

logger = logging.getLogger("WaveAttack.Bench")

HEADERS = ["Evaluation", "Method", "Mean time (s)", "Std/Mean", "Solves per call", "Speedup"]
MIN_REPETITIONS = 30
# Shortcut over naive, per evaluation, for a timing run to count as a pass.
MIN_SPEEDUP = 10.0


def time_calls(fn: Callable[[], object], repetitions: int, ops: StepOperators, label: str) -> Dict[str, float]:
    """Times `repetitions` calls after one warm-up call; counts sparse solves per call."""
    fn()
    times = []
    solves_before = ops.solve_count
    for _ in tqdm(range(repetitions), desc=label, leave=False):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    times = np.asarray(times)
    mean = float(times.mean())
    return {
        "mean_s": mean,
        "std_over_mean": float(times.std() / mean) if mean > 0.0 else 0.0,
        "solves_per_call": (ops.solve_count - solves_before) / repetitions,
    }


def meets_speedup_target(speedup: float, repetitions: int) -> bool:
    """A speedup only counts when it is large enough and measured over enough repetitions."""
    return repetitions >= MIN_REPETITIONS and speedup >= MIN_SPEEDUP


def build_table(results: Dict[str, Dict[str, float]], repetitions: int = MIN_REPETITIONS) -> List[List[str]]:
    rows = []
    for evaluation, slow, fast in (("Objective", "naive", "shortcut"), ("Gradient", "adjoint", "shortcut")):
        slow_stats = results[f"{evaluation.lower()}_{slow}"]
        fast_stats = results[f"{evaluation.lower()}_{fast}"]
        speedup = slow_stats["mean_s"] / fast_stats["mean_s"] if fast_stats["mean_s"] > 0.0 else float("inf")
        for method, stats in ((slow, slow_stats), (fast, fast_stats)):
            rows.append([evaluation, method, f"{stats['mean_s']:.4e}", f"{stats['std_over_mean']:.3f}",
                         f"{stats['solves_per_call']:g}", ""])
        rows.append([evaluation, "speedup", "", "", "", f"{speedup:.1f}x"])
        results[f"{evaluation.lower()}_speedup"] = {"value": speedup,
                                                    "meets_target": meets_speedup_target(speedup, repetitions)}
    return rows


def run_benchmark(workspace: Workspace, repetitions: int = MIN_REPETITIONS) -> Dict:
    if repetitions < MIN_REPETITIONS:
        logger.warning(f"Only {repetitions} repetitions requested; timings below {MIN_REPETITIONS} are noisy.")
    cfg = workspace.cfg
    mesh = workspace.load_mesh()
    ops = workspace.step_operators(mesh)
    green_i, green_s = workspace.load_green("interferer"), workspace.load_green("intruder")
    projector = workspace.load_projector()
    detector = workspace.load_detector()
    example = workspace.load_split("val")[0]

    intruder = IntruderAgent(green_s, workspace.plan, workspace.noise_spec, cfg.threshold_hz,
                             cfg.intruder_amplitude, cfg.floor_db)
    problem = AttackProblem(green_i=green_i, green_s=green_s, intruder=intruder.signal(example.frequency_hz).samples,
                            plan=workspace.plan, projector=projector, detector=detector, label=example.label,
                            noise=intruder.noise_offset(example.frequency_hz, example.seed), floor_db=cfg.floor_db)
    naive = NaiveEvaluator(problem, ops, workspace.sim_config, receiver=workspace.detector_weights(mesh))

    rng = np.random.default_rng(derive_seed(cfg.seed, "bench"))
    f = project(projector, 0.1 * cfg.intruder_amplitude * rng.standard_normal(problem.num_samples))

    results = {
        "objective_naive": time_calls(lambda: naive.objective(f), repetitions, ops, "objective naive"),
        "objective_shortcut": time_calls(lambda: objective(problem, f), repetitions, ops, "objective shortcut"),
        "gradient_adjoint": time_calls(lambda: naive.gradient(f), repetitions, ops, "gradient adjoint"),
        "gradient_shortcut": time_calls(lambda: gradient(problem, f), repetitions, ops, "gradient shortcut"),
    }
    table = tabulate(build_table(results, repetitions), headers=HEADERS, tablefmt="github")
    path = workspace.root / "bench_table.md"
    path.write_text(table + "\n", encoding="utf-8")
    logger.info("\n" + table)
    for key in ("objective_shortcut", "gradient_shortcut"):
        if results[key]["solves_per_call"] != 0:
            logger.error(f"{key} performed {results[key]['solves_per_call']} sparse solves per call.")
    speedup_ok = all(results[f"{name}_speedup"]["meets_target"] for name in ("objective", "gradient"))
    if not speedup_ok:
        logger.warning(f"Speedup below {MIN_SPEEDUP:g}x or fewer than {MIN_REPETITIONS} repetitions: "
                       f"objective {results['objective_speedup']['value']:.1f}x, "
                       f"gradient {results['gradient_speedup']['value']:.1f}x over {repetitions} calls.")
    return {"table_path": str(path), "repetitions": repetitions, "nodes": mesh.num_nodes,
            "num_steps": cfg.num_steps, "speedup_ok": speedup_ok, **results}


def main():
    parser = argparse.ArgumentParser(description="Naive versus shortcut objective/gradient timings.")
    parser.add_argument("--profile", type=str, default="desk")
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--out", type=str, default=None)
    parser.add_argument("--repetitions", type=int, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s:%(message)s")
    try:
        cfg = build_config(args.profile, args.config)
        workspace = Workspace(cfg, args.out)
        summary = run_benchmark(workspace, args.repetitions or cfg.bench_repetitions)
        print(json.dumps(summary, indent=2, default=float))
    except WaveAttackError as e:
        logger.error(str(e))
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
