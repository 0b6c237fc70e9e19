import numpy as np
import pytest

from agents.detector import DetectorAgent, init_params
from physics.adjoint_green import green_for_source, precompute_adjoint_column
from physics.fem_assembly import Point2, Rectangle, assemble_all, build_rect_mesh, receiver_weights
from physics.wave_sim import SimConfig, TimeGrid, build_step_operators
from signal_processing.spectral import StftPlan, build_projector, disallowed_rows

# A unit square with a 4 x 4 cell grid: 25 nodes, 32 triangles.
UNIT = Rectangle(0.0, 1.0, 0.0, 1.0)
WAVE_SPEED = 1.0
DT = 0.05
NUM_STEPS = 40
EPSILON = 0.5
INTERFERER = Point2(0.3, 0.6)
INTRUDER = Point2(0.2, 0.8)
DETECTOR = Point2(0.7, 0.3)


@pytest.fixture(scope="session")
def unit_mesh():
    return build_rect_mesh(UNIT, 0.25)


@pytest.fixture(scope="session")
def unit_matrices(unit_mesh):
    return assemble_all(unit_mesh)


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(DT, NUM_STEPS)


@pytest.fixture(scope="session")
def sim_config():
    return SimConfig(wave_speed=WAVE_SPEED, interferer=INTERFERER, intruder=INTRUDER,
                     detector=DETECTOR, epsilon=EPSILON)


@pytest.fixture
def ops(unit_mesh, unit_matrices, grid):
    """Fresh step operators per test so solve counters start at zero."""
    return build_step_operators(unit_mesh, WAVE_SPEED, grid, matrices=unit_matrices)


@pytest.fixture
def detector_vector(unit_mesh):
    return receiver_weights(unit_mesh, DETECTOR)


@pytest.fixture
def greens(ops, detector_vector, grid):
    adj = precompute_adjoint_column(ops, detector_vector, grid)
    green_i = green_for_source(ops, adj, INTERFERER, EPSILON, "interferer")
    green_s = green_for_source(ops, adj, INTRUDER, EPSILON, "intruder")
    return green_i, green_s


@pytest.fixture(scope="session")
def small_plan(grid):
    # 41 samples, 8-sample windows with 50% overlap, 5 frequencies from 0 to Nyquist (10 Hz).
    return StftPlan(window=8, hop=4, num_freqs=5, dt=grid.dt, num_samples=grid.num_samples)


@pytest.fixture(scope="session")
def small_projector(small_plan):
    return build_projector(small_plan, disallowed_rows(small_plan, band_low_hz=3.0))


@pytest.fixture(scope="session")
def random_detector(small_plan):
    model = init_params(small_plan.shape, seed=7, conv1_channels=2, conv2_channels=3, shift=-40.0, scale=20.0)
    return DetectorAgent(model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
