# physics/wave_sim.py

"""
Leapfrog time integration of the semidiscrete wave equation

    M u'' = -c^2 K u - c S u' + M q

with the first-order absorbing boundary folded into the step matrices

    A- = M - (c dt / 2) S,   A0 = c^2 dt^2 K - 2 M,   A+ = M + (c dt / 2) S,

so that each step solves  A+ u^{k+1} = -A0 u^k - A- u^{k-1} + dt^2 M q^k.

This is the "naive" forward path: every evaluation of the detector trace costs
K - 1 solves with A+. It also provides the backward (adjoint) time loop used
by the classical adjoint gradient, and an energy diagnostic.

Time indexing: u^0 = u^1 = 0 and the forcing is switched on from step
FIRST_FORCED_STEP = 2, so f(t_0), f(t_1) and f(t_K) never reach the detector.
The corresponding samples are kept in every signal for shape consistency.
"""
import math
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from physics.fem_assembly import (
    FemMatrices, NodalVector, Point2, TriMesh, assemble_all, mollified_delta, receiver_weights,
)
from utils.errors import InvalidInputError, InvalidParameterError, NumericError

logger = logging.getLogger("WaveAttack.WaveSim")

FIRST_FORCED_STEP = 2
# Above this node count the A+ solves switch to preconditioned CG.
ITERATIVE_SOLVER_THRESHOLD = 200_000
ITERATIVE_RTOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    num_steps: int  # K; samples live at t_k = k dt for k = 0..K

    def __post_init__(self):
        if not (self.dt > 0.0) or not math.isfinite(self.dt):
            raise InvalidParameterError(f"dt={self.dt} must be positive and finite.")
        if int(self.num_steps) != self.num_steps or self.num_steps < 2:
            raise InvalidParameterError(f"num_steps={self.num_steps} must be an integer >= 2.")

    @property
    def num_samples(self) -> int:
        return self.num_steps + 1

    @property
    def final_time(self) -> float:
        return self.num_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.num_samples) * self.dt

    @classmethod
    def from_final_time(cls, final_time: float, num_steps: int) -> "TimeGrid":
        return cls(dt=final_time / num_steps, num_steps=num_steps)


@dataclass(frozen=True)
class Signal:
    """A sampled time series on a `TimeGrid` (pressure in Pa or a unitless amplitude)."""
    samples: np.ndarray
    dt: float
    units: str = "Pa"

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise InvalidInputError(f"Signal samples must be one-dimensional, got shape {samples.shape}.")
        if not np.all(np.isfinite(samples)):
            raise NumericError("Signal contains non-finite samples.")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @classmethod
    def zeros(cls, grid: TimeGrid, units: str = "Pa") -> "Signal":
        return cls(np.zeros(grid.num_samples), grid.dt, units)


SignalLike = Union[Signal, np.ndarray, Sequence[float]]


def as_samples(signal: SignalLike, length: Optional[int] = None) -> np.ndarray:
    """Returns the raw float samples of a `Signal` or array, checking the length if given."""
    samples = signal.samples if isinstance(signal, Signal) else np.asarray(signal, dtype=float)
    if samples.ndim != 1:
        raise InvalidInputError(f"Expected a one-dimensional signal, got shape {samples.shape}.")
    if length is not None and samples.shape[0] != length:
        raise InvalidInputError(f"Signal has {samples.shape[0]} samples, expected {length}.")
    return samples


Positions = Union[Point2, Sequence[Point2]]


@dataclass(frozen=True)
class SimConfig:
    """Physical setup of one simulation. Positions are either static or one per sample."""
    wave_speed: float
    interferer: Positions
    intruder: Positions
    detector: Point2
    epsilon: float

    def __post_init__(self):
        if not (self.wave_speed > 0.0):
            raise InvalidParameterError(f"wave_speed={self.wave_speed} must be positive.")
        if not (self.epsilon > 0.0):
            raise InvalidParameterError(f"epsilon={self.epsilon} must be positive.")
        object.__setattr__(self, "interferer", _normalize_positions(self.interferer))
        object.__setattr__(self, "intruder", _normalize_positions(self.intruder))
        object.__setattr__(self, "detector", Point2(*self.detector))

    def positions(self, which: str, grid: TimeGrid) -> Tuple[Point2, ...]:
        """Per-sample positions (length K + 1) of the 'interferer' or 'intruder' source."""
        pos = getattr(self, which)
        if isinstance(pos, Point2):
            return (pos,) * grid.num_samples
        if len(pos) != grid.num_samples:
            raise InvalidInputError(f"{which} has {len(pos)} positions, expected K+1={grid.num_samples}.")
        return pos

    def is_static(self, which: str) -> bool:
        return isinstance(getattr(self, which), Point2)


def _normalize_positions(pos: Positions) -> Positions:
    if len(pos) == 2 and np.isscalar(pos[0]):
        return Point2(float(pos[0]), float(pos[1]))
    return tuple(Point2(float(p[0]), float(p[1])) for p in pos)


@dataclass
class StepOperators:
    """
    Step matrices of the leapfrog scheme plus a reusable solver for A+.

    `solve` is the only place a sparse solve happens; it is counted in
    `solve_count` so callers can assert that cached paths perform none.
    `pass_count` counts full time-loop passes (forward or adjoint).
    """
    mesh: TriMesh
    matrices: FemMatrices
    wave_speed: float
    grid: TimeGrid
    A_minus: sp.csr_matrix
    A_zero: sp.csr_matrix
    A_plus: sp.csr_matrix
    solver_kind: str = "direct"
    solve_count: int = 0
    factorization_count: int = 0
    pass_count: int = 0
    _factor: object = field(default=None, repr=False)
    _preconditioner: object = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _load_cache: Dict[Tuple[Point2, float], NodalVector] = field(default_factory=dict, repr=False)

    def factorize(self) -> None:
        if self.solver_kind == "direct":
            self._factor = spla.splu(self.A_plus.tocsc())
        else:
            diag = self.A_plus.diagonal()
            self._preconditioner = spla.LinearOperator(self.A_plus.shape, matvec=lambda x: x / diag)
        with self._lock:
            self.factorization_count += 1

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        with self._lock:
            self.solve_count += 1
        if self.solver_kind == "direct":
            x = self._factor.solve(rhs)
        else:
            x, info = spla.cg(self.A_plus, rhs, rtol=ITERATIVE_RTOL, M=self._preconditioner)
            if info != 0:
                raise NumericError(f"CG on A+ did not converge (info={info}).")
        if not np.all(np.isfinite(x)):
            raise NumericError("Solve with A+ produced non-finite values.")
        return x

    def count_pass(self) -> None:
        with self._lock:
            self.pass_count += 1

    def reset_counters(self) -> None:
        with self._lock:
            self.solve_count = 0
            self.pass_count = 0

    def load_vector(self, center: Point2, epsilon: float) -> NodalVector:
        """dt^2 M delta_eps(. - center): the per-unit-amplitude forcing of one step (cached)."""
        key = (Point2(*center), float(epsilon))
        with self._lock:
            cached = self._load_cache.get(key)
        if cached is None:
            cached = self.grid.dt ** 2 * (self.matrices.M @ mollified_delta(self.mesh, key[0], epsilon))
            cached.setflags(write=False)
            with self._lock:
                self._load_cache[key] = cached
        return cached


def cfl_estimate(mesh: TriMesh, c: float) -> float:
    """Conservative explicit step bound h_min / (c sqrt 2), h_min the shortest edge."""
    if not (c > 0.0):
        raise InvalidParameterError(f"wave speed c={c} must be positive.")
    return float(mesh.edge_lengths().min()) / (c * math.sqrt(2.0))


def stable_dt_bound(matrices: FemMatrices, c: float) -> float:
    """Sharp leapfrog limit 2 / (c sqrt(lambda_max(M^-1 K))) for the reflecting problem."""
    lam_max = spla.eigsh(matrices.K.tocsc(), k=1, M=matrices.M.tocsc(), which="LM",
                         return_eigenvectors=False)[0]
    return 2.0 / (c * math.sqrt(float(lam_max)))


def build_step_operators(mesh: TriMesh, c: float, grid: TimeGrid, matrices: Optional[FemMatrices] = None,
                         absorbing: bool = True, solver: Optional[str] = None,
                         check_spectrum: bool = False) -> StepOperators:
    """
    Forms A-, A0, A+ and factorizes A+ once. A step above the stability
    estimate only produces a warning, so an unstable step can still be run on purpose.
    `absorbing=False` drops S (reflecting walls), used for energy checks.
    """
    if not (c > 0.0):
        raise InvalidParameterError(f"wave speed c={c} must be positive.")
    matrices = matrices if matrices is not None else assemble_all(mesh)
    if not absorbing:
        matrices = FemMatrices(M=matrices.M, K=matrices.K, S=sp.csr_matrix(matrices.M.shape))
    dt = grid.dt
    half = 0.5 * c * dt
    A_minus = (matrices.M - half * matrices.S).tocsr()
    A_zero = (c * c * dt * dt * matrices.K - 2.0 * matrices.M).tocsr()
    A_plus = (matrices.M + half * matrices.S).tocsr()

    dt_max = cfl_estimate(mesh, c)
    if dt > dt_max:
        logger.warning(f"dt={dt:.4e} exceeds the CFL estimate {dt_max:.4e}; leapfrog may be unstable.")
    if check_spectrum:
        dt_sharp = stable_dt_bound(matrices, c)
        if dt > dt_sharp:
            logger.warning(f"dt={dt:.4e} exceeds the spectral stability bound {dt_sharp:.4e}.")

    if solver is None:
        solver = "direct" if mesh.num_nodes <= ITERATIVE_SOLVER_THRESHOLD else "iterative"
    if solver not in ("direct", "iterative"):
        raise InvalidParameterError(f"Unknown solver '{solver}' (expected 'direct' or 'iterative').")
    ops = StepOperators(mesh=mesh, matrices=matrices, wave_speed=c, grid=grid,
                        A_minus=A_minus, A_zero=A_zero, A_plus=A_plus, solver_kind=solver)
    ops.factorize()
    logger.debug(f"Step operators ready: {mesh.num_nodes} nodes, dt={dt:.4e}, K={grid.num_steps}, solver={solver}.")
    return ops


def _per_step_loads(ops: StepOperators, config: SimConfig, which: str) -> Callable[[int], NodalVector]:
    positions = config.positions(which, ops.grid)
    return lambda k: ops.load_vector(positions[k], config.epsilon)


def leapfrog_solve(ops: StepOperators, f: SignalLike, g: SignalLike, config: SimConfig,
                   grid: Optional[TimeGrid] = None, keep_history: bool = False,
                   receiver: Optional[NodalVector] = None) -> Tuple[Signal, Optional[np.ndarray]]:
    """
    Runs the K - 1 leapfrog steps from zero initial data and returns the
    detector trace s_k = d . u^k (and the full field history if asked).
    """
    grid = grid or ops.grid
    if grid != ops.grid:
        raise InvalidInputError(f"Time grid {grid} does not match the step operators' grid {ops.grid}.")
    n_samples = grid.num_samples
    f = as_samples(f, n_samples)
    g = as_samples(g, n_samples)
    d = receiver if receiver is not None else receiver_weights(ops.mesh, config.detector)
    load_i = _per_step_loads(ops, config, "interferer")
    load_s = _per_step_loads(ops, config, "intruder")

    n = ops.mesh.num_nodes
    u_prev = np.zeros(n)
    u_curr = np.zeros(n)
    s = np.zeros(n_samples)
    history = np.zeros((n_samples, n)) if keep_history else None

    ops.count_pass()
    for k in range(1, grid.num_steps):
        rhs = -(ops.A_zero @ u_curr) - (ops.A_minus @ u_prev)
        if k >= FIRST_FORCED_STEP:
            if f[k] != 0.0:
                rhs += f[k] * load_i(k)
            if g[k] != 0.0:
                rhs += g[k] * load_s(k)
        u_next = ops.solve(rhs)
        s[k + 1] = d @ u_next
        if history is not None:
            history[k + 1] = u_next
        u_prev, u_curr = u_curr, u_next
    return Signal(s, grid.dt), history


def adjoint_solve(ops: StepOperators, residual: SignalLike, config: SimConfig,
                  grid: Optional[TimeGrid] = None, receiver: Optional[NodalVector] = None) -> np.ndarray:
    """
    Backward time loop of the classical adjoint method. Given r = dJ/ds it solves

        A+ lam_n = r_n d - A0 lam_{n+1} - A- lam_{n+2},   n = K, ..., 2,

    (lam_{K+1} = lam_{K+2} = 0) and returns dJ/df_k = lam_{k+1} . (dt^2 M delta_i^k)
    for 2 <= k <= K - 1, zero elsewhere.
    """
    grid = grid or ops.grid
    n_samples = grid.num_samples
    r = as_samples(residual, n_samples)
    d = receiver if receiver is not None else receiver_weights(ops.mesh, config.detector)
    load_i = _per_step_loads(ops, config, "interferer")

    n = ops.mesh.num_nodes
    lam_next = np.zeros(n)   # lam_{n+1}
    lam_next2 = np.zeros(n)  # lam_{n+2}
    grad = np.zeros(n_samples)
    K = grid.num_steps

    ops.count_pass()
    for step in range(K, FIRST_FORCED_STEP - 1, -1):
        rhs = r[step] * d - ops.A_zero @ lam_next - ops.A_minus @ lam_next2
        lam = ops.solve(rhs)
        k = step - 1
        if FIRST_FORCED_STEP <= k <= K - 1:
            grad[k] = lam @ load_i(k)
        lam_next2, lam_next = lam_next, lam
    return grad


def energy_trace(history: np.ndarray, ops: StepOperators) -> np.ndarray:
    """
    Discrete energy per step,
    E^k = 1/2 (u^k - u^{k-1})^T M (u^k - u^{k-1}) / dt^2 + c^2/2 (u^k)^T K u^{k-1},
    with E^0 = 0. Conserved exactly by leapfrog when S = 0 and the forcing is off.
    """
    history = np.asarray(history, dtype=float)
    if history.ndim != 2 or history.shape[1] != ops.mesh.num_nodes:
        raise InvalidInputError(f"Field history must have shape (K+1, {ops.mesh.num_nodes}).")
    M, K = ops.matrices.M, ops.matrices.K
    c, dt = ops.wave_speed, ops.grid.dt
    energy = np.zeros(history.shape[0])
    du = np.diff(history, axis=0)
    kinetic = 0.5 * np.einsum("ij,ij->i", du, (M @ du.T).T) / dt ** 2
    potential = 0.5 * c * c * np.einsum("ij,ij->i", history[1:], (K @ history[:-1].T).T)
    energy[1:] = kinetic + potential
    return energy
