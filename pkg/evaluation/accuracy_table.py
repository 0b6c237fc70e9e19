# evaluation/accuracy_table.py

"""
Validation accuracy of the detector without and with the interferer.

"Without" is the trained detector on the noisy validation spectrograms;
"with" counts an example as correct only if the attack on it failed (an
example the detector already got wrong counts as a successful attack).

Run standalone after `train` and `attack`:
    python -m evaluation.accuracy_table --profile desk [--config FILE] [--out DIR]
"""
import argparse
import json
import logging
import sys
from typing import Dict, List, Sequence

from tabulate import tabulate

from agents.detector import EvaluationResult
from utils import artifact_io
from utils.config_loader import build_config
from utils.errors import WaveAttackError
from utils.workspace import Workspace

logger = logging.getLogger("WaveAttack.Evaluation")

HEADERS = ["Network", "Accuracy Without Interferer", "Accuracy With Interferer"]


def _flag(value) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes")


def accuracy_with_interferer(report_rows: Sequence[Dict[str, str]]) -> float:
    if not report_rows:
        return float("nan")
    survived = sum(1 for row in report_rows if not _flag(row["success"]))
    return survived / len(report_rows)


def attack_statistics(report_rows: Sequence[Dict[str, str]]) -> Dict[str, float]:
    """Flip rate among clean-correct examples and amplitude ratios of successful attacks."""
    clean_correct = [r for r in report_rows if float(r["clean_conf"]) > 0.5 or
                     (float(r["clean_conf"]) == 0.5 and int(r["label"]) == 0)]
    flipped = [r for r in clean_correct if _flag(r["success"])]
    ratios = sorted(float(r["amp_ratio"]) for r in flipped)
    median_ratio = ratios[len(ratios) // 2] if ratios else float("nan")
    return {
        "attacked": len(report_rows),
        "clean_correct": len(clean_correct),
        "flipped": len(flipped),
        "flip_rate": len(flipped) / len(clean_correct) if clean_correct else float("nan"),
        "median_amp_ratio": median_ratio,
        "mean_iterations": (sum(int(r["iters"]) for r in flipped) / len(flipped)) if flipped else float("nan"),
    }


def build_table(network: str, clean: EvaluationResult, report_rows: Sequence[Dict[str, str]]) -> List[List[str]]:
    with_interferer = accuracy_with_interferer(report_rows)
    return [[network, f"{100.0 * clean.accuracy:.3f}%", f"{100.0 * with_interferer:.3f}%"]]


def format_table(rows: List[List[str]]) -> str:
    return tabulate(rows, headers=HEADERS, tablefmt="github")


def write_accuracy_table(workspace: Workspace, network: str = "compact CNN") -> Dict:
    """Evaluates the stored model on the validation split and joins it with the attack report."""
    detector = workspace.load_detector()
    clean = detector.evaluate(workspace.load_split("val"))
    report = artifact_io.read_rows(workspace.attack_report_path)
    rows = build_table(network, clean, report)
    table = format_table(rows)
    stats = attack_statistics(report)
    path = workspace.root / "accuracy_table.md"
    path.write_text(table + "\n", encoding="utf-8")
    logger.info("\n" + table)
    logger.info(f"Flip rate among clean-correct examples: {stats['flip_rate']:.3f} "
                f"({stats['flipped']}/{stats['clean_correct']}), median amplitude ratio {stats['median_amp_ratio']:.3g}.")
    return {
        "table_path": str(path),
        "accuracy_without_interferer": clean.accuracy,
        "accuracy_with_interferer": accuracy_with_interferer(report),
        "confusion": {"tp": clean.true_positive, "tn": clean.true_negative,
                      "fp": clean.false_positive, "fn": clean.false_negative},
        **stats,
    }


def main():
    parser = argparse.ArgumentParser(description="Accuracy table with and without the interferer.")
    parser.add_argument("--profile", type=str, default="desk")
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--out", type=str, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s:%(message)s")
    try:
        workspace = Workspace(build_config(args.profile, args.config), args.out)
        print(json.dumps(write_accuracy_table(workspace), indent=2, default=float))
    except WaveAttackError as e:
        logger.error(str(e))
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
