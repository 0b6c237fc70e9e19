# physics/fem_assembly.py

"""
Spatial discretization of the rectangle of water: a triangulation, the P1
finite element matrices and the nodal vectors that couple point sources and
the detector to the mesh.

Objects produced here:
  - `TriMesh`: vertices, counter-clockwise triangles and the boundary edge list.
  - Mass `M` (integral of u v), stiffness `K` (integral of grad u . grad v) and
    surface mass `S` (integral of u v over the boundary), all symmetric
    `scipy.sparse.csr_matrix` instances.
  - `mollified_delta`: nodal interpolation of the product-Cauchy approximation
    of a point source.
  - `receiver_weights`: the row vector d such that d @ u is the value of the
    P1 field u at the detector.

Everything is a pure function of its inputs; arrays stored on `TriMesh` are
made read-only so a mesh can be shared between threads.
"""
import math
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
import scipy.sparse as sp

from utils.errors import InvalidDomainError, InvalidParameterError, InvalidInputError, OutOfDomainError

logger = logging.getLogger("WaveAttack.FEM")

# Role aliases. Sparse symmetric operators are plain CSR matrices and nodal
# vectors plain float arrays, one value per mesh vertex.
SparseSymMatrix = sp.csr_matrix
NodalVector = np.ndarray

# Largest admissible interior jitter as a fraction of the cell size. Keeps the
# longest edge below 1.5 * target_h and every triangle positively oriented.
MAX_JITTER = 0.03

_P1_MASS_TEMPLATE = np.array([[2.0, 1.0, 1.0],
                              [1.0, 2.0, 1.0],
                              [1.0, 1.0, 2.0]]) / 12.0
_P1_EDGE_TEMPLATE = np.array([[2.0, 1.0],
                              [1.0, 2.0]]) / 6.0


class Point2(NamedTuple):
    x1: float
    x2: float


class Rectangle(NamedTuple):
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def perimeter(self) -> float:
        return 2.0 * (self.width + self.height)

    def contains(self, point: Point2, tol: float = 0.0) -> bool:
        return (self.xmin - tol <= point[0] <= self.xmax + tol
                and self.ymin - tol <= point[1] <= self.ymax + tol)


@dataclass(frozen=True)
class TriMesh:
    """Conforming triangulation of a rectangle with its boundary edges."""
    vertices: np.ndarray        # (nv, 2) float
    triangles: np.ndarray       # (nt, 3) int, counter-clockwise
    boundary_edges: np.ndarray  # (nb, 2) int
    domain: Rectangle

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_edges):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def edge_lengths(self) -> np.ndarray:
        """Lengths of all triangle edges (each interior edge counted twice)."""
        p = self.vertices[self.triangles]
        d = p[:, [1, 2, 0], :] - p
        return np.hypot(d[..., 0], d[..., 1]).ravel()

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


def _check_rectangle(domain: Rectangle) -> Rectangle:
    domain = Rectangle(*map(float, domain))
    if not all(math.isfinite(v) for v in domain):
        raise InvalidDomainError(f"Rectangle has non-finite bounds: {domain}")
    if domain.width <= 0.0 or domain.height <= 0.0:
        raise InvalidDomainError(f"Degenerate rectangle {domain}: both side lengths must be positive.")
    return domain


def build_rect_mesh(domain: Rectangle, target_h: float, jitter: float = 0.0, seed: int = 0) -> TriMesh:
    """
    Triangulates the rectangle with a structured grid of cells of size at most
    `target_h`, each split into two triangles along the same diagonal.

    Interior vertices may be displaced by a seeded uniform jitter of at most
    `jitter * min(dx, dy)` to mimic a nearly uniform unstructured mesh.
    Boundary vertices never move, so boundary edges stay on the perimeter.
    """
    domain = _check_rectangle(domain)
    if not (target_h > 0.0) or target_h > min(domain.width, domain.height):
        raise InvalidParameterError(
            f"target_h={target_h} must be positive and no larger than both sides of {domain}.")
    if not (0.0 <= jitter <= MAX_JITTER):
        raise InvalidParameterError(f"jitter={jitter} must lie in [0, {MAX_JITTER}].")

    nx = max(1, math.ceil(domain.width / target_h - 1e-9))
    ny = max(1, math.ceil(domain.height / target_h - 1e-9))
    xs = np.linspace(domain.xmin, domain.xmax, nx + 1)
    ys = np.linspace(domain.ymin, domain.ymax, ny + 1)
    gx, gy = np.meshgrid(xs, ys)  # row j holds y = ys[j]
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(i, j):
        return i + j * (nx + 1)

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    v00, v10, v11, v01 = vid(ii, jj), vid(ii + 1, jj), vid(ii + 1, jj + 1), vid(ii, jj + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    i_range, j_range = np.arange(nx), np.arange(ny)
    bottom = np.column_stack([vid(i_range, 0), vid(i_range + 1, 0)])
    right = np.column_stack([vid(nx, j_range), vid(nx, j_range + 1)])
    top = np.column_stack([vid(i_range[::-1] + 1, ny), vid(i_range[::-1], ny)])
    left = np.column_stack([vid(0, j_range[::-1] + 1), vid(0, j_range[::-1])])
    boundary_edges = np.vstack([bottom, right, top, left]).astype(np.int64)

    if jitter > 0.0 and nx > 1 and ny > 1:
        rng = np.random.default_rng(seed)
        amplitude = jitter * min(domain.width / nx, domain.height / ny)
        interior = np.zeros((ny + 1, nx + 1), dtype=bool)
        interior[1:-1, 1:-1] = True
        interior = interior.ravel()
        vertices[interior] += rng.uniform(-amplitude, amplitude, size=(int(interior.sum()), 2))

    mesh = TriMesh(vertices=vertices, triangles=triangles, boundary_edges=boundary_edges, domain=domain)
    validate_mesh(mesh)
    logger.debug(f"Built {nx}x{ny} cell mesh: {mesh.num_nodes} nodes, {mesh.num_triangles} triangles.")
    return mesh


def validate_mesh(mesh: TriMesh) -> None:
    """Raises `InvalidInputError` when the mesh breaks a structural invariant."""
    nv = mesh.num_nodes
    if mesh.triangles.ndim != 2 or mesh.triangles.shape[1] != 3:
        raise InvalidInputError("Triangles must be an (nt, 3) index array.")
    if mesh.boundary_edges.ndim != 2 or mesh.boundary_edges.shape[1] != 2:
        raise InvalidInputError("Boundary edges must be an (nb, 2) index array.")
    for name, arr in (("triangles", mesh.triangles), ("boundary_edges", mesh.boundary_edges)):
        if arr.size and (arr.min() < 0 or arr.max() >= nv):
            raise InvalidInputError(f"Mesh {name} reference vertices outside [0, {nv}).")
    if not np.all(np.isfinite(mesh.vertices)):
        raise InvalidInputError("Mesh vertices must be finite.")
    areas = mesh.signed_areas()
    if np.any(areas <= 0.0):
        raise InvalidInputError(f"{int(np.sum(areas <= 0.0))} triangle(s) have non-positive signed area.")


def assemble_mass(mesh: TriMesh) -> SparseSymMatrix:
    """P1 consistent mass matrix: element blocks (area/12)[[2,1,1],[1,2,1],[1,1,2]]."""
    areas = mesh.signed_areas()
    local = areas[:, None, None] * _P1_MASS_TEMPLATE[None, :, :]
    return _scatter(mesh.triangles, local, mesh.num_nodes)


def assemble_stiffness(mesh: TriMesh) -> SparseSymMatrix:
    """P1 stiffness matrix: element blocks (b b^T + c c^T) / (4 area)."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    areas = mesh.signed_areas()
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * areas[:, None, None])
    return _scatter(mesh.triangles, local, mesh.num_nodes)


def assemble_surface_mass(mesh: TriMesh) -> SparseSymMatrix:
    """Boundary mass matrix: edge blocks (length/6)[[2,1],[1,2]]."""
    e = mesh.boundary_edges
    d = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    lengths = np.hypot(d[:, 0], d[:, 1])
    local = lengths[:, None, None] * _P1_EDGE_TEMPLATE[None, :, :]
    return _scatter(e, local, mesh.num_nodes)


def _scatter(connectivity: np.ndarray, local: np.ndarray, n: int) -> SparseSymMatrix:
    k = connectivity.shape[1]
    rows = np.repeat(connectivity, k, axis=1).ravel()
    cols = np.tile(connectivity, (1, k)).ravel()
    # COO -> CSR sums duplicates in a fixed order, so assembly is deterministic.
    matrix = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    matrix.sum_duplicates()
    return matrix


def mollified_delta(mesh: TriMesh, center: Point2, epsilon: float) -> NodalVector:
    """Nodal values of eps^2 / (pi^2 (x1^2 + eps^2)(x2^2 + eps^2)) shifted to `center`."""
    if not (epsilon > 0.0):
        raise InvalidParameterError(f"epsilon={epsilon} must be positive.")
    dx = mesh.vertices[:, 0] - center[0]
    dy = mesh.vertices[:, 1] - center[1]
    eps2 = epsilon * epsilon
    return eps2 / (math.pi ** 2 * (dx * dx + eps2) * (dy * dy + eps2))


def barycentric_coordinates(mesh: TriMesh, point: Point2) -> np.ndarray:
    """Barycentric coordinates of `point` with respect to every triangle, shape (nt, 3)."""
    p = mesh.vertices[mesh.triangles]
    x0, y0 = p[:, 0, 0], p[:, 0, 1]
    a, b = p[:, 1, 0] - x0, p[:, 2, 0] - x0
    c, d = p[:, 1, 1] - y0, p[:, 2, 1] - y0
    det = a * d - b * c
    rx, ry = point[0] - x0, point[1] - y0
    lam1 = (d * rx - b * ry) / det
    lam2 = (-c * rx + a * ry) / det
    return np.column_stack([1.0 - lam1 - lam2, lam1, lam2])


def locate(mesh: TriMesh, point: Point2, tol: float = 1e-12) -> Tuple[int, np.ndarray]:
    """Lowest-index triangle containing `point` and its barycentric weights."""
    scale = max(mesh.domain.width, mesh.domain.height)
    if not mesh.domain.contains(point, tol=tol * scale):
        raise OutOfDomainError(f"Point {tuple(point)} lies outside the domain {tuple(mesh.domain)}.")
    lam = barycentric_coordinates(mesh, point)
    inside = np.all(lam >= -tol, axis=1)
    hits = np.flatnonzero(inside)
    if hits.size == 0:
        raise OutOfDomainError(f"No triangle contains point {tuple(point)}.")
    tri = int(hits[0])
    weights = lam[tri].copy()
    weights[np.abs(weights) < tol] = 0.0
    weights /= weights.sum()
    return tri, weights


def receiver_weights(mesh: TriMesh, x_d: Point2) -> NodalVector:
    """Point-evaluation vector d: d @ u is the P1 interpolant of u at `x_d`."""
    tri, weights = locate(mesh, x_d)
    d = np.zeros(mesh.num_nodes)
    d[mesh.triangles[tri]] = weights
    return d


def mesh_size(mesh: TriMesh) -> float:
    """Median edge length, used as the local mesh size h."""
    return float(np.median(mesh.edge_lengths()))


def default_epsilon(mesh: TriMesh) -> float:
    return 2.0 * mesh_size(mesh)


def is_symmetric(matrix: SparseSymMatrix, tol: float = 1e-14) -> bool:
    diff = (matrix - matrix.T).tocoo()
    if diff.nnz == 0:
        return True
    scale = max(abs(matrix).max(), 1.0)
    return float(np.max(np.abs(diff.data))) <= tol * scale


class FemMatrices(NamedTuple):
    """The three Galerkin matrices of one mesh."""
    M: SparseSymMatrix
    K: SparseSymMatrix
    S: SparseSymMatrix


def assemble_all(mesh: TriMesh) -> FemMatrices:
    matrices = FemMatrices(M=assemble_mass(mesh), K=assemble_stiffness(mesh), S=assemble_surface_mass(mesh))
    logger.info(f"Assembled M, K, S for {mesh.num_nodes} nodes "
                f"(nnz M={matrices.M.nnz}, K={matrices.K.nnz}, S={matrices.S.nnz}).")
    return matrices
