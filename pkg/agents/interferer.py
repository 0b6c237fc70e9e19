# agents/interferer.py
"""
Agent: InterfererAgent
Purpose:
  Designs the waveform f emitted by the interferer so that the detector
  misclassifies what it hears, i.e. maximizes

      J(f) = BCE(Phi(spectrogram(G_i f + G_s g [+ noise])), y)

  over signals f whose STFT has no content in the forbidden band.

  Objective and gradient go through the precomputed Green operators only, so
  an evaluation costs a few convolutions and no PDE solve:
      dJ/df = G_i^T  spectrogram_vjp( dL/d(spectrogram) ).

  Optimization: L-BFGS on -J with a backtracking line search, either over
  null-space coordinates z (f = N z, mode "reduced") or over f with projected
  gradients P_N grad J (mode "projected"). The detector's decision is checked
  at iteration 0 and every `check_every` iterations; the run stops as soon as
  it is fooled.

  `NaiveEvaluator` recomputes the same objective by a full leapfrog solve and
  the gradient by the classical forward + adjoint time loops. It is the
  reference for tests and the benchmark.

Input:
  - AttackProblem (Green operators, intruder signal, noise offset, plan,
    projector, detector, true label), AttackConfig.
Output:
  - AttackResult per attacked example.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from agents.detector import DetectorAgent
from physics.adjoint_green import GreenOperator, apply_green, transpose_green
from physics.wave_sim import SignalLike, Signal, SimConfig, StepOperators, adjoint_solve, as_samples, leapfrog_solve
from signal_processing.spectral import (
    DEFAULT_FLOOR_DB, NullspaceProjector, StftPlan, project, spectrogram_db, spectrogram_vjp,
)
from utils.errors import InvalidInputError, InvalidParameterError, NumericError

logger = logging.getLogger("WaveAttack.Interferer")

ATTACK_MODES = ("reduced", "projected")


@dataclass(frozen=True)
class AttackConfig:
    max_iters: int = 100
    check_every: int = 10
    memory: int = 10
    mode: str = "reduced"
    initial_step_norm: float = 1.0
    armijo: float = 1e-4
    contraction: float = 0.5
    max_backtracks: int = 30
    grad_tol: float = 1e-14
    curvature_tol: float = 1e-10

    def __post_init__(self):
        if not (self.max_iters >= self.check_every >= 1):
            raise InvalidParameterError(
                f"Need max_iters >= check_every >= 1, got {self.max_iters} and {self.check_every}.")
        if self.mode not in ATTACK_MODES:
            raise InvalidParameterError(f"Unknown attack mode '{self.mode}', expected one of {ATTACK_MODES}.")
        if self.memory < 1:
            raise InvalidParameterError(f"L-BFGS memory must be positive, got {self.memory}.")
        if not (0.0 < self.contraction < 1.0) or not (0.0 < self.armijo < 1.0):
            raise InvalidParameterError("Line-search contraction and Armijo parameter must lie in (0, 1).")


@dataclass
class AttackProblem:
    green_i: GreenOperator
    green_s: GreenOperator
    intruder: np.ndarray
    plan: StftPlan
    projector: NullspaceProjector
    detector: DetectorAgent
    label: int
    noise: Optional[np.ndarray] = None
    floor_db: float = DEFAULT_FLOOR_DB
    apply_method: str = "direct"
    clean_trace: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.green_i.num_samples
        if (self.green_s.num_steps, self.green_s.dt) != (self.green_i.num_steps, self.green_i.dt):
            raise InvalidInputError("Interferer and intruder Green operators use different time grids.")
        if self.plan.num_samples != n:
            raise InvalidInputError(f"STFT plan covers {self.plan.num_samples} samples, signals have {n}.")
        if self.projector.dim != n:
            raise InvalidInputError(f"Projector acts on {self.projector.dim} samples, signals have {n}.")
        if self.noise is not None and self.noise.shape != self.plan.shape:
            raise InvalidInputError(f"Noise offset shape {self.noise.shape} does not match {self.plan.shape}.")
        if self.label not in (0, 1):
            raise InvalidInputError(f"Label must be 0 or 1, got {self.label}.")
        self.intruder = np.asarray(as_samples(self.intruder, n), dtype=float)
        self.clean_trace = apply_green(self.green_s, self.intruder, method=self.apply_method).samples

    @property
    def num_samples(self) -> int:
        return self.green_i.num_samples

    def received(self, f: SignalLike) -> np.ndarray:
        """Detector trace with the interferer emitting f."""
        return self.clean_trace + apply_green(self.green_i, f, method=self.apply_method).samples

    def spectrogram(self, f: SignalLike) -> np.ndarray:
        return spectrogram_db(self.received(f), self.plan, self.floor_db, offset=self.noise).values


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"Non-finite {name} during objective evaluation (max|.|={np.nanmax(np.abs(value))}).")


def loss_from_trace(problem: AttackProblem, trace: np.ndarray) -> float:
    values = spectrogram_db(trace, problem.plan, problem.floor_db, offset=problem.noise).values
    loss, _ = problem.detector.loss_and_input_gradient(values, problem.label)
    return loss


def trace_gradient(problem: AttackProblem, trace: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """(J, dJ/ds, spectrogram) for a given detector trace s."""
    values = spectrogram_db(trace, problem.plan, problem.floor_db, offset=problem.noise).values
    loss, g_values = problem.detector.loss_and_input_gradient(values, problem.label)
    _check_finite("spectrogram gradient", g_values)
    g_trace = spectrogram_vjp(trace, problem.plan, g_values, problem.floor_db, offset=problem.noise)
    _check_finite("trace gradient", g_trace)
    return loss, g_trace, values


def objective(problem: AttackProblem, f: SignalLike) -> float:
    trace = problem.received(f)
    _check_finite("detector trace", trace)
    return loss_from_trace(problem, trace)


def objective_and_gradient(problem: AttackProblem, f: SignalLike) -> Tuple[float, np.ndarray, np.ndarray]:
    """(J, dJ/df, spectrogram), one forward and one backward pass through the Green operators."""
    trace = problem.received(f)
    _check_finite("detector trace", trace)
    loss, g_trace, values = trace_gradient(problem, trace)
    return loss, transpose_green(problem.green_i, g_trace, method=problem.apply_method), values


def gradient(problem: AttackProblem, f: SignalLike) -> np.ndarray:
    return objective_and_gradient(problem, f)[1]


class NaiveEvaluator:
    """Objective and gradient of an AttackProblem recomputed with full time-loop solves."""

    def __init__(self, problem: AttackProblem, ops: StepOperators, config: SimConfig,
                 receiver: Optional[np.ndarray] = None):
        self.problem = problem
        self.ops = ops
        self.config = config
        self.receiver = receiver

    def trace(self, f: SignalLike) -> np.ndarray:
        signal, _ = leapfrog_solve(self.ops, f, self.problem.intruder, self.config, receiver=self.receiver)
        return signal.samples

    def objective(self, f: SignalLike) -> float:
        return loss_from_trace(self.problem, self.trace(f))

    def gradient(self, f: SignalLike) -> np.ndarray:
        """One forward leapfrog pass plus one adjoint pass."""
        _, g_trace, _ = trace_gradient(self.problem, self.trace(f))
        return adjoint_solve(self.ops, g_trace, self.config, receiver=self.receiver)


def adjoint_gradient_oracle(problem: AttackProblem, f: SignalLike, ops: StepOperators,
                            config: SimConfig) -> np.ndarray:
    return NaiveEvaluator(problem, ops, config).gradient(f)


class LBFGSMemory:
    """Curvature pairs (s, y) and the two-loop product with the inverse Hessian estimate."""

    def __init__(self, size: int, curvature_tol: float = 1e-10):
        self.size = size
        self.curvature_tol = curvature_tol
        self.pairs: List[Tuple[np.ndarray, np.ndarray, float]] = []

    def __len__(self) -> int:
        return len(self.pairs)

    def reset(self) -> None:
        self.pairs.clear()

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Stores the pair if s.y > tol |s| |y|; returns whether it was kept."""
        sy = float(s @ y)
        if sy <= self.curvature_tol * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((s, y, 1.0 / sy))
        if len(self.pairs) > self.size:
            self.pairs.pop(0)
        return True

    def apply_inverse(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q


@dataclass
class AttackResult:
    f_star: Signal
    iterations: int
    objective_history: List[float]
    clean_confidence: float
    final_confidence: float
    clean_spectrogram: np.ndarray
    perturbed_spectrogram: np.ndarray
    success: bool
    amplitude_ratio: float
    message: str = ""
    confidence_trace: List[Tuple[int, float]] = field(default_factory=list)
    feasibility_residual: float = 0.0


class InterfererAgent:
    """Runs the L-BFGS attack of one problem; stateless between runs."""

    def __init__(self, config: AttackConfig):
        self.config = config

    def _to_signal(self, problem: AttackProblem, x: np.ndarray) -> np.ndarray:
        if self.config.mode == "reduced":
            return problem.projector.basis @ x
        return x

    def _to_coordinates(self, problem: AttackProblem, grad_f: np.ndarray) -> np.ndarray:
        if self.config.mode == "reduced":
            return problem.projector.basis.T @ grad_f
        return project(problem.projector, grad_f)

    def _evaluate(self, problem: AttackProblem, x: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """-J and its gradient in optimizer coordinates, plus the spectrogram."""
        loss, grad_f, values = objective_and_gradient(problem, self._to_signal(problem, x))
        return -loss, -self._to_coordinates(problem, grad_f), values

    def run(self, problem: AttackProblem) -> AttackResult:
        cfg = self.config
        detector, label = problem.detector, problem.label
        dim = problem.projector.rank if cfg.mode == "reduced" else problem.num_samples
        x = np.zeros(dim)
        phi, g, values = self._evaluate(problem, x)
        clean_values = values
        clean_conf = detector.confidence(values, label)
        history = [-phi]
        conf_trace = [(0, clean_conf)]
        best_x, best_phi = x.copy(), phi
        memory = LBFGSMemory(cfg.memory, cfg.curvature_tol)
        success = detector.is_fooled(values, label)
        message = "already misclassified" if success else ""
        iteration = 0

        while not success and iteration < cfg.max_iters:
            g_norm = float(np.linalg.norm(g))
            if g_norm < cfg.grad_tol:
                message = f"no ascent direction (|grad|={g_norm:.2e})"
                break
            if len(memory) == 0:
                direction = -g * (cfg.initial_step_norm / g_norm)
            else:
                direction = -memory.apply_inverse(g)
                if g @ direction >= 0.0:
                    memory.reset()
                    direction = -g * (cfg.initial_step_norm / g_norm)
            slope = float(g @ direction)

            step, accepted = 1.0, False
            for _ in range(cfg.max_backtracks):
                x_trial = x + step * direction
                if cfg.mode == "projected":
                    x_trial = project(problem.projector, x_trial)
                phi_trial, g_trial, values_trial = self._evaluate(problem, x_trial)
                if phi_trial <= phi + cfg.armijo * step * slope:
                    accepted = True
                    break
                step *= cfg.contraction
            if not accepted:
                message = f"line search failed after {cfg.max_backtracks} backtracks"
                break

            memory.push(x_trial - x, g_trial - g)
            x, phi, g, values = x_trial, phi_trial, g_trial, values_trial
            iteration += 1
            history.append(-phi)
            if phi < best_phi:
                best_x, best_phi = x.copy(), phi

            if iteration % cfg.check_every == 0 or iteration == cfg.max_iters:
                conf = detector.confidence(values, label)
                conf_trace.append((iteration, conf))
                logger.debug(f"Iteration {iteration}: J={-phi:.5f}, true-class confidence {conf:.4f}.")
                if detector.is_fooled(values, label):
                    success = True
                    message = f"misclassified at iteration {iteration}"
        if not success and not message:
            message = f"not misclassified within {cfg.max_iters} iterations"

        f_star = self._to_signal(problem, best_x)
        perturbed = problem.spectrogram(f_star)
        g_peak = float(np.max(np.abs(problem.intruder)))
        amp_ratio = float(np.max(np.abs(f_star)) / g_peak) if g_peak > 0.0 else math.inf
        return AttackResult(
            f_star=Signal(f_star, problem.green_i.dt),
            iterations=iteration,
            objective_history=history,
            clean_confidence=clean_conf,
            final_confidence=detector.confidence(perturbed, label),
            clean_spectrogram=clean_values,
            perturbed_spectrogram=perturbed,
            success=success,
            amplitude_ratio=amp_ratio,
            message=message,
            confidence_trace=conf_trace,
            feasibility_residual=problem.projector.residual(f_star),
        )


def run_attack(problem: AttackProblem, config: AttackConfig) -> AttackResult:
    return InterfererAgent(config).run(problem)


def attack_many(problems: Dict[str, AttackProblem], config: AttackConfig, max_workers: int = 4,
                show_progress: bool = True) -> Dict[str, Optional[AttackResult]]:
    """
    Attacks every problem in a thread pool. The problems may share Green
    operators, projector and detector. A failed attack is logged and mapped to None.
    """
    agent = InterfererAgent(config)
    results: Dict[str, Optional[AttackResult]] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_info = {executor.submit(agent.run, problem): example_id for example_id, problem in problems.items()}
        for future in tqdm(as_completed(future_to_info), total=len(future_to_info), desc="Attacking",
                           disable=not show_progress):
            example_id = future_to_info[future]
            try:
                result = future.result()
                results[example_id] = result
                logger.debug(f"{example_id}: success={result.success} after {result.iterations} iterations "
                             f"({result.message}).")
            except Exception as e:
                logger.error(f"Attack on {example_id} failed: {e}", exc_info=True)
                results[example_id] = None
    return {example_id: results[example_id] for example_id in problems}
