# physics/adjoint_green.py

"""
Receiver Green operator of the leapfrog scheme.

The whole time loop is a block lower-triangular, block-Toeplitz system
A u = B f + C g, and the detector trace is s = D u. One adjoint solve for the
last block column of A^{-T} D^T gives vectors y_1, ..., y_{K-1} with

    A+ y_1 = d,   A+ y_2 = -A0 y_1,   A+ y_m = -A0 y_{m-1} - A- y_{m-2},

and the response to a unit source amplitude at step j is read off as

    s_k = dt^2 y_{k-j}^T M delta^j      (2 <= j < k <= K).

With a static source this is a causal convolution with the kernel
h_m = dt^2 y_m^T M delta, so every later evaluation of s, and of ds/df, costs
matrix-vector products only. Moving sources fall back to a dense (K+1)^2 map.

Input:  StepOperators, detector weights, source position(s)
Output: GreenOperator (kernel or dense) plus apply / transpose / Jacobian
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.signal as ss

from physics.fem_assembly import NodalVector, Point2, mollified_delta
from physics.wave_sim import FIRST_FORCED_STEP, SignalLike, Signal, StepOperators, TimeGrid, as_samples
from utils.errors import InvalidInputError, InvalidParameterError

logger = logging.getLogger("WaveAttack.Green")

KERNEL = "kernel"
DENSE = "dense"
GREEN_MODES = (KERNEL, DENSE)
APPLY_METHODS = ("direct", "fft")


@dataclass(frozen=True)
class AdjointColumn:
    """Blocks y_1..y_{K-1} of the last block column of the adjoint solution, stacked as rows."""
    y_hat: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        if self.y_hat.ndim != 2 or self.y_hat.shape[0] != self.grid.num_steps - 1:
            raise InvalidInputError(
                f"Adjoint column must hold K-1={self.grid.num_steps - 1} blocks, got shape {self.y_hat.shape}."
            )

    def __len__(self) -> int:
        return int(self.y_hat.shape[0])

    def block(self, m: int) -> NodalVector:
        """y_m, 1-based as in the recursion."""
        return self.y_hat[m - 1]


@dataclass(frozen=True)
class GreenOperator:
    """
    Linear map from a source amplitude signal (K+1 samples) to its detector trace.

    kernel mode: `kernel[m-1] = h_m` for m = 1..K-1 (static source).
    dense mode:  `dense[k, j] = G[k][j]`, strictly lower triangular, zero in
                 the first two rows and columns (moving source).
    """
    mode: str
    dt: float
    num_steps: int
    source: str = "interferer"
    kernel: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in GREEN_MODES:
            raise InvalidParameterError(f"Unknown Green operator mode '{self.mode}'.")
        n = self.num_samples
        if self.mode == KERNEL:
            if self.kernel is None or np.shape(self.kernel) != (self.num_steps - 1,):
                raise InvalidInputError(f"Kernel must have length K-1={self.num_steps - 1}.")
            data = np.array(self.kernel, dtype=float)
        else:
            if self.dense is None or np.shape(self.dense) != (n, n):
                raise InvalidInputError(f"Dense Green matrix must have shape ({n}, {n}).")
            data = np.array(self.dense, dtype=float)
        data.setflags(write=False)
        object.__setattr__(self, "kernel" if self.mode == KERNEL else "dense", data)

    @property
    def num_samples(self) -> int:
        return self.num_steps + 1

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.num_steps)

    def full_kernel(self) -> np.ndarray:
        """[0, h_1, ..., h_{K-1}]: impulse response indexed by lag, length K."""
        if self.mode != KERNEL:
            raise InvalidParameterError("full_kernel is only defined for kernel-mode operators.")
        return np.concatenate(([0.0], self.kernel))


def precompute_adjoint_column(ops: StepOperators, d: NodalVector, grid: Optional[TimeGrid] = None) -> AdjointColumn:
    """Back-substitution for the last block column: exactly K - 1 solves against the one factorization of A+."""
    grid = grid or ops.grid
    if grid != ops.grid:
        raise InvalidInputError(f"Time grid {grid} does not match the step operators' grid {ops.grid}.")
    d = np.asarray(d, dtype=float)
    if d.shape != (ops.mesh.num_nodes,):
        raise InvalidInputError(f"Detector weights must have length {ops.mesh.num_nodes}, got {d.shape}.")

    n_blocks = grid.num_steps - 1
    y_hat = np.zeros((n_blocks, ops.mesh.num_nodes))
    solves_before = ops.solve_count
    ops.count_pass()
    for m in range(n_blocks):
        if m == 0:
            rhs = d
        elif m == 1:
            rhs = -(ops.A_zero @ y_hat[0])
        else:
            rhs = -(ops.A_zero @ y_hat[m - 1]) - (ops.A_minus @ y_hat[m - 2])
        y_hat[m] = ops.solve(rhs)
    y_hat.setflags(write=False)
    logger.info(
        f"Adjoint column: {ops.solve_count - solves_before} back-substitutions, "
        f"{ops.factorization_count} factorization(s) of A+."
    )
    return AdjointColumn(y_hat=y_hat, grid=grid)


def complete_adjoint(adj: AdjointColumn, ops: StepOperators) -> Tuple[NodalVector, NodalVector]:
    """
    Top blocks of the last adjoint column, for the u^0 and u^1 unknowns:
    y^0 = -A- y_{K-1},  y^1 = -A0 y_{K-1} - A- y_{K-2}.
    They multiply zero rows of B and C, so no trace ever depends on them.
    """
    last = adj.block(len(adj))
    before_last = adj.block(len(adj) - 1) if len(adj) >= 2 else np.zeros_like(last)
    y0 = -(ops.A_minus @ last)
    y1 = -(ops.A_zero @ last) - (ops.A_minus @ before_last)
    return y0, y1


def build_green(adj: AdjointColumn, M, delta_source: Union[NodalVector, Sequence[NodalVector]],
                grid: Optional[TimeGrid] = None, source: str = "interferer") -> GreenOperator:
    """
    Contracts the adjoint column against dt^2 M delta. A single nodal vector
    yields a kernel-mode operator; one vector per sample (K+1) yields dense mode.
    """
    grid = grid or adj.grid
    if grid != adj.grid:
        raise InvalidInputError(f"Time grid {grid} does not match the adjoint column's grid {adj.grid}.")
    n_nodes = adj.y_hat.shape[1]
    deltas = np.asarray(delta_source, dtype=float)
    dt2 = grid.dt ** 2

    if deltas.ndim == 1:
        if deltas.shape[0] != n_nodes:
            raise InvalidInputError(f"Source vector has length {deltas.shape[0]}, mesh has {n_nodes} nodes.")
        kernel = adj.y_hat @ (dt2 * (M @ deltas))
        logger.debug(f"Kernel-mode Green operator for {source}: max|h|={np.abs(kernel).max():.3e}.")
        return GreenOperator(mode=KERNEL, dt=grid.dt, num_steps=grid.num_steps, source=source, kernel=kernel)

    n = grid.num_samples
    if deltas.shape != (n, n_nodes):
        raise InvalidInputError(f"Per-step source vectors must have shape ({n}, {n_nodes}), got {deltas.shape}.")
    loads = dt2 * (M @ deltas.T)             # (n_nodes, K+1)
    P = adj.y_hat @ loads                    # P[m-1, j] = y_m . dt^2 M delta^j
    dense = np.zeros((n, n))
    for j in range(FIRST_FORCED_STEP, grid.num_steps):
        dense[j + 1:, j] = P[: n - j - 1, j]
    logger.debug(f"Dense-mode Green operator for {source}: {n}x{n}.")
    return GreenOperator(mode=DENSE, dt=grid.dt, num_steps=grid.num_steps, source=source, dense=dense)


def _masked(G: GreenOperator, signal: SignalLike) -> np.ndarray:
    x = np.array(as_samples(signal, G.num_samples), dtype=float)
    x[:FIRST_FORCED_STEP] = 0.0
    return x


def _convolve(a: np.ndarray, b: np.ndarray, n: int, method: str) -> np.ndarray:
    if method == "direct":
        return np.convolve(a, b)[:n]
    if method == "fft":
        return ss.fftconvolve(a, b)[:n]
    raise InvalidParameterError(f"Unknown apply method '{method}', expected one of {APPLY_METHODS}.")


def apply_green(G: GreenOperator, signal: SignalLike, method: str = "direct") -> Signal:
    """Detector trace produced by `signal` at the operator's source. s_0 = s_1 = 0."""
    x = _masked(G, signal)
    n = G.num_samples
    if G.mode == KERNEL:
        s = _convolve(x, G.full_kernel(), n, method)
    else:
        s = G.dense @ x
    s[:FIRST_FORCED_STEP] = 0.0
    return Signal(s, G.dt)


def transpose_green(G: GreenOperator, residual: SignalLike, method: str = "direct") -> np.ndarray:
    """G^T r as a correlation with the kernel; entries 0, 1 (never forced) are zero."""
    r = np.asarray(as_samples(residual, G.num_samples), dtype=float)
    n = G.num_samples
    if G.mode == KERNEL:
        out = _convolve(r[::-1], G.full_kernel(), n, method)[::-1].copy()
    else:
        out = G.dense.T @ r
    out[:FIRST_FORCED_STEP] = 0.0
    return out


def jacobian_green(G: GreenOperator) -> np.ndarray:
    """ds/df as an explicit (K+1)x(K+1) strictly lower-triangular matrix."""
    if G.mode == DENSE:
        return np.array(G.dense)
    n = G.num_samples
    column = np.concatenate((G.full_kernel(), [0.0]))
    J = sla.toeplitz(column, np.zeros(n))
    J[:, :FIRST_FORCED_STEP] = 0.0
    J[:FIRST_FORCED_STEP, :] = 0.0
    return J


def green_for_source(ops: StepOperators, adj: AdjointColumn, position: Union[Point2, Sequence[Point2]],
                     epsilon: float, source: str) -> GreenOperator:
    """Convenience wrapper: mollified source(s) at `position` then `build_green`."""
    if len(position) == 2 and np.isscalar(position[0]):
        delta = mollified_delta(ops.mesh, Point2(*position), epsilon)
    else:
        cache = {}
        rows = []
        for p in position:
            p = Point2(*p)
            if p not in cache:
                cache[p] = mollified_delta(ops.mesh, p, epsilon)
            rows.append(cache[p])
        delta = np.vstack(rows)
    return build_green(adj, ops.matrices.M, delta, adj.grid, source=source)
