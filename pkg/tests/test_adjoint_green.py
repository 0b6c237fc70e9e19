import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from physics.adjoint_green import (
    DENSE, KERNEL, GreenOperator, apply_green, build_green, complete_adjoint, green_for_source,
    jacobian_green, precompute_adjoint_column, transpose_green,
)
from physics.fem_assembly import Point2, mollified_delta, receiver_weights
from physics.wave_sim import SimConfig, TimeGrid, build_step_operators, leapfrog_solve
from signal_processing.spectral import StftPlan, build_projector, disallowed_rows, project
from utils.errors import InvalidInputError, InvalidParameterError

from tests.conftest import DETECTOR, EPSILON, INTERFERER, INTRUDER, WAVE_SPEED


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_precompute_costs_k_minus_one_solves(ops, detector_vector, grid):
    adj = precompute_adjoint_column(ops, detector_vector, grid)
    assert len(adj) == grid.num_steps - 1
    assert ops.solve_count == grid.num_steps - 1
    assert ops.factorization_count == 1
    with pytest.raises(ValueError):
        adj.y_hat[0, 0] = 1.0


def test_green_operators_reproduce_the_leapfrog_trace(ops, greens, sim_config, grid, rng):
    green_i, green_s = greens
    assert green_i.mode == KERNEL and green_s.source == "intruder"
    n = grid.num_samples
    f, g = rng.standard_normal(n), rng.standard_normal(n)
    expected, _ = leapfrog_solve(ops, f, g, sim_config)
    solves = ops.solve_count
    fast = apply_green(green_i, f).samples + apply_green(green_s, g).samples
    assert ops.solve_count == solves
    assert _relative_error(fast, expected.samples) <= 1e-9


@pytest.fixture(scope="module")
def long_run(unit_mesh, unit_matrices):
    """K = 400 on the 25-node mesh, with the band projector of a 16-sample STFT."""
    long_grid = TimeGrid(0.05, 400)
    long_ops = build_step_operators(unit_mesh, WAVE_SPEED, long_grid, matrices=unit_matrices)
    adj = precompute_adjoint_column(long_ops, receiver_weights(unit_mesh, DETECTOR), long_grid)
    green_i = green_for_source(long_ops, adj, INTERFERER, EPSILON, "interferer")
    green_s = green_for_source(long_ops, adj, INTRUDER, EPSILON, "intruder")
    plan = StftPlan(window=16, hop=16, num_freqs=9, dt=long_grid.dt, num_samples=long_grid.num_samples)
    projector = build_projector(plan, disallowed_rows(plan, band_low_hz=3.0))
    config = SimConfig(wave_speed=WAVE_SPEED, interferer=INTERFERER, intruder=INTRUDER,
                       detector=DETECTOR, epsilon=EPSILON)
    return long_ops, green_i, green_s, projector, config


@pytest.mark.parametrize("seed", range(20))
def test_feasible_signals_match_the_leapfrog_trace_over_400_steps(long_run, seed):
    long_ops, green_i, green_s, projector, config = long_run
    rng = np.random.default_rng(seed)
    n = long_ops.grid.num_samples
    f = project(projector, rng.standard_normal(n))
    g = rng.standard_normal(n)
    assert projector.residual(f) <= 1e-8 * np.linalg.norm(f)
    expected, _ = leapfrog_solve(long_ops, f, g, config)
    solves = long_ops.solve_count
    fast = apply_green(green_i, f).samples + apply_green(green_s, g).samples
    assert long_ops.solve_count == solves
    assert np.abs(fast - expected.samples).max() <= 1e-9 * np.abs(expected.samples).max()


def test_fft_convolution_matches_direct(greens, rng, grid):
    green_i, _ = greens
    f = rng.standard_normal(grid.num_samples)
    np.testing.assert_allclose(apply_green(green_i, f, method="fft").samples, apply_green(green_i, f).samples,
                               rtol=1e-10, atol=1e-12 * np.abs(green_i.kernel).max())
    r = rng.standard_normal(grid.num_samples)
    np.testing.assert_allclose(transpose_green(green_i, r, method="fft"), transpose_green(green_i, r),
                               rtol=1e-10, atol=1e-12 * np.abs(green_i.kernel).max())
    with pytest.raises(InvalidParameterError):
        apply_green(green_i, f, method="wavelet")


def test_transpose_is_the_adjoint(greens, rng, grid):
    green_i, _ = greens
    f, r = rng.standard_normal(grid.num_samples), rng.standard_normal(grid.num_samples)
    lhs = apply_green(green_i, f).samples @ r
    rhs = f @ transpose_green(green_i, r)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-300)


def test_jacobian_is_strictly_lower_triangular(greens, rng, grid):
    green_i, _ = greens
    J = jacobian_green(green_i)
    f = rng.standard_normal(grid.num_samples)
    np.testing.assert_allclose(J @ f, apply_green(green_i, f).samples, rtol=1e-12, atol=1e-12 * np.abs(J).sum())
    assert np.all(np.triu(J) == 0.0)
    assert np.all(J[:, :2] == 0.0) and np.all(J[:2, :] == 0.0)


def test_moving_source_uses_dense_mode(ops, detector_vector, grid, rng):
    n = grid.num_samples
    path = [Point2(0.2 + 0.5 * k / n, 0.6) for k in range(n)]
    config = SimConfig(wave_speed=WAVE_SPEED, interferer=path, intruder=INTRUDER, detector=DETECTOR,
                       epsilon=EPSILON)
    adj = precompute_adjoint_column(ops, detector_vector, grid)
    G = green_for_source(ops, adj, path, EPSILON, "interferer")
    assert G.mode == DENSE
    f = rng.standard_normal(n)
    expected, _ = leapfrog_solve(ops, f, np.zeros(n), config)
    assert _relative_error(apply_green(G, f).samples, expected.samples) <= 1e-9
    r = rng.standard_normal(n)
    assert abs(apply_green(G, f).samples @ r - f @ transpose_green(G, r)) <= 1e-12 * np.abs(f).sum() * np.abs(r).sum()


def test_dense_mode_of_a_static_source_equals_the_kernel(ops, detector_vector, grid):
    adj = precompute_adjoint_column(ops, detector_vector, grid)
    delta = mollified_delta(ops.mesh, INTERFERER, EPSILON)
    kernel_mode = build_green(adj, ops.matrices.M, delta)
    dense_mode = build_green(adj, ops.matrices.M, np.tile(delta, (grid.num_samples, 1)))
    expected = jacobian_green(kernel_mode)
    np.testing.assert_allclose(jacobian_green(dense_mode), expected, rtol=1e-10, atol=1e-12 * np.abs(expected).max())


def test_block_system_oracle(unit_mesh, unit_matrices, detector_vector):
    """Solve the full (K+1)-block adjoint system densely and compare every block."""
    grid = TimeGrid(0.05, 6)
    ops = build_step_operators(unit_mesh, WAVE_SPEED, grid, matrices=unit_matrices)
    K, n = grid.num_steps, unit_mesh.num_nodes
    A_minus, A_zero, A_plus = (m.toarray() for m in (ops.A_minus, ops.A_zero, ops.A_plus))

    A = np.zeros(((K + 1) * n, (K + 1) * n))

    def block(i):
        return slice(i * n, (i + 1) * n)

    A[block(0), block(0)] = np.eye(n)
    A[block(1), block(1)] = np.eye(n)
    for k in range(1, K):
        A[block(k + 1), block(k - 1)] = A_minus
        A[block(k + 1), block(k)] = A_zero
        A[block(k + 1), block(k + 1)] = A_plus
    rhs = np.zeros((K + 1) * n)
    rhs[block(K)] = detector_vector
    Y = np.linalg.solve(A.T, rhs)

    adj = precompute_adjoint_column(ops, detector_vector, grid)
    for j in range(2, K + 1):
        np.testing.assert_allclose(Y[block(j)], adj.block(K - j + 1), rtol=1e-9, atol=1e-9 * np.abs(Y).max())
    y0, y1 = complete_adjoint(adj, ops)
    np.testing.assert_allclose(Y[block(0)], y0, rtol=1e-9, atol=1e-9 * np.abs(Y).max())
    np.testing.assert_allclose(Y[block(1)], y1, rtol=1e-9, atol=1e-9 * np.abs(Y).max())

    # s_K = Y^T (B f): the top blocks meet zero rows of B.
    load = ops.load_vector(INTERFERER, EPSILON)
    f = np.linspace(-1.0, 1.0, K + 1)
    forcing = np.zeros((K + 1) * n)
    for j in range(2, K):
        forcing[block(j + 1)] = f[j] * load
    G = build_green(adj, ops.matrices.M, mollified_delta(unit_mesh, INTERFERER, EPSILON))
    assert Y @ forcing == pytest.approx(apply_green(G, f).samples[K], rel=1e-10)


def test_green_operator_validation():
    with pytest.raises(InvalidParameterError):
        GreenOperator(mode="sparse", dt=0.1, num_steps=4, kernel=np.zeros(3))
    with pytest.raises(InvalidInputError):
        GreenOperator(mode=KERNEL, dt=0.1, num_steps=4, kernel=np.zeros(4))
    with pytest.raises(InvalidInputError):
        GreenOperator(mode=DENSE, dt=0.1, num_steps=4, dense=np.zeros((4, 4)))
    G = GreenOperator(mode=DENSE, dt=0.1, num_steps=4, dense=np.zeros((5, 5)))
    with pytest.raises(InvalidParameterError):
        G.full_kernel()
    with pytest.raises(InvalidInputError):
        apply_green(G, np.zeros(4))


def test_build_green_checks_shapes(ops, detector_vector, grid):
    adj = precompute_adjoint_column(ops, detector_vector, grid)
    with pytest.raises(InvalidInputError):
        build_green(adj, ops.matrices.M, np.zeros(ops.mesh.num_nodes + 1))
    with pytest.raises(InvalidInputError):
        build_green(adj, ops.matrices.M, np.zeros((3, ops.mesh.num_nodes)))
    with pytest.raises(InvalidInputError):
        precompute_adjoint_column(ops, np.zeros(3), grid)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-5.0, 5.0), st.floats(-5.0, 5.0))
def test_kernel_application_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    G = GreenOperator(mode=KERNEL, dt=0.01, num_steps=30, kernel=rng.standard_normal(29))
    x, y = rng.standard_normal(31), rng.standard_normal(31)
    combined = apply_green(G, a * x + b * y).samples
    separate = a * apply_green(G, x).samples + b * apply_green(G, y).samples
    np.testing.assert_allclose(combined, separate, rtol=1e-9, atol=1e-9)
