"""
Discrete vector calculus on the MAC grid.

All operators are sparse matrices acting on the interior-face vector of a
`FaceField` (see `core.mesh.grid`). Inner products are h^2-weighted sums,
so a matrix transpose is the adjoint under the discrete L2 product.

Conventions that the rest of the package relies on:
- gradient is exactly minus the transpose of divergence;
- the vector Laplacian is symmetric negative definite (Dirichlet walls via
  ghost reflection for the tangential component);
- convection C(a) is the skew part of the centered advection operator K(a),
  C(a) = (K(a) - K(a)^T) / 2, so <C(a) v, v> = 0 for every a.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.fft import dctn, idctn

from core.errors import DimensionError, SolverFailure
from .grid import CellScalar, FaceField, Grid, StaggeredVelocity

# Relative divergence residual above which a projection is rejected
PROJECTION_TOLERANCE = 1e-10


# ===== 1D building blocks =====

def _second_difference(m: int, h: float, ghost: bool) -> sp.csr_matrix:
    """Three-point second difference; ghost=True reflects across a wall half a cell away."""
    mat = sp.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]).tolil()
    if ghost:
        mat[0, 0] = -3.0
        mat[m - 1, m - 1] = -3.0
    return mat.tocsr() / (h * h)


def _central_difference(m: int, h: float, ghost: bool) -> sp.csr_matrix:
    mat = sp.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1]).tolil()
    if ghost:
        mat[0, 0] = 1.0
        mat[m - 1, m - 1] = -1.0
    return mat.tocsr() / (2.0 * h)


def _face_average(n: int) -> sp.csr_matrix:
    """(n-1) x n: value at interior face r is the mean of cells r and r+1."""
    return sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n)).tocsr()


def _face_to_cell_difference(n: int, h: float) -> sp.csr_matrix:
    """n x (n-1): difference of the two faces bounding each cell (walls are zero)."""
    return (sp.diags([np.ones(n - 1), -np.ones(n - 1)], [0, -1], shape=(n, n - 1)) / h).tocsr()


# ===== Assembled operators =====

@dataclass(frozen=True)
class GridOperators:
    """Sparse operators of one grid, assembled once and cached."""

    grid: Grid
    laplacian: sp.csr_matrix
    dx_u: sp.csr_matrix
    dy_u: sp.csr_matrix
    dx_v: sp.csr_matrix
    dy_v: sp.csr_matrix
    avg_vu: sp.csr_matrix
    avg_uv: sp.csr_matrix
    divergence: sp.csr_matrix
    gradient: sp.csr_matrix
    neumann_eigenvalues: np.ndarray

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[: self.grid.n_u], x[self.grid.n_u:]


@lru_cache(maxsize=16)
def grid_operators(grid: Grid) -> GridOperators:
    n, h = grid.n, grid.h
    eye_n = sp.identity(n, format="csr")
    eye_m = sp.identity(n - 1, format="csr")

    d2_wall = _second_difference(n - 1, h, ghost=False)
    d2_ghost = _second_difference(n, h, ghost=True)
    dc_wall = _central_difference(n - 1, h, ghost=False)
    dc_ghost = _central_difference(n, h, ghost=True)

    lap_u = sp.kron(d2_wall, eye_n) + sp.kron(eye_m, d2_ghost)
    lap_v = sp.kron(d2_ghost, eye_m) + sp.kron(eye_n, d2_wall)

    avg = _face_average(n)
    avg_vu = sp.kron(avg, avg.T).tocsr()

    bx = _face_to_cell_difference(n, h)
    div = sp.hstack([sp.kron(bx, eye_n), sp.kron(eye_n, bx)]).tocsr()

    lam = (4.0 / (h * h)) * np.sin(np.pi * np.arange(n) / (2.0 * n)) ** 2
    eig = -(lam[:, None] + lam[None, :])

    return GridOperators(
        grid=grid,
        laplacian=sp.block_diag([lap_u, lap_v], format="csr"),
        dx_u=sp.kron(dc_wall, eye_n).tocsr(),
        dy_u=sp.kron(eye_m, dc_ghost).tocsr(),
        dx_v=sp.kron(dc_ghost, eye_m).tocsr(),
        dy_v=sp.kron(eye_n, dc_wall).tocsr(),
        avg_vu=avg_vu,
        avg_uv=avg_vu.T.tocsr(),
        divergence=div,
        gradient=(-div.T).tocsr(),
        neumann_eigenvalues=eig,
    )


# ===== Vector-level kernels (used by the solvers) =====

def _advection_coefficients(ops: GridOperators, a: np.ndarray):
    a_u, a_v = ops.split(a)
    return a_u, ops.avg_vu @ a_v, ops.avg_uv @ a_u, a_v


def advection_matrix(grid: Grid, a: np.ndarray) -> sp.csr_matrix:
    """Centered advection K(a): (a . grad) applied componentwise."""
    ops = grid_operators(grid)
    cx_u, cy_u, cx_v, cy_v = _advection_coefficients(ops, a)
    k_u = sp.diags(cx_u) @ ops.dx_u + sp.diags(cy_u) @ ops.dy_u
    k_v = sp.diags(cx_v) @ ops.dx_v + sp.diags(cy_v) @ ops.dy_v
    return sp.block_diag([k_u, k_v], format="csr")


def convection_matrix(grid: Grid, a: Optional[np.ndarray]) -> sp.csr_matrix:
    """Skew-symmetric convection C(a) = (K(a) - K(a)^T) / 2."""
    if a is None:
        return sp.csr_matrix((grid.dim, grid.dim))
    k = advection_matrix(grid, a)
    return (0.5 * (k - k.T)).tocsr()


def convection_jacobian_matrix(grid: Grid, y: np.ndarray) -> sp.csr_matrix:
    """Matrix E(y) with E(y) d = C(d) y, the derivative of C(a) y in a."""
    ops = grid_operators(grid)
    y_u, y_v = ops.split(y)

    def block(diff: sp.csr_matrix, comp: np.ndarray) -> sp.csr_matrix:
        return 0.5 * (sp.diags(diff @ comp) - diff.T @ sp.diags(comp))

    e_uu = block(ops.dx_u, y_u)
    e_uv = block(ops.dy_u, y_u) @ ops.avg_vu
    e_vu = block(ops.dx_v, y_v) @ ops.avg_uv
    e_vv = block(ops.dy_v, y_v)
    return sp.bmat([[e_uu, e_uv], [e_vu, e_vv]], format="csr")


def apply_convection(grid: Grid, a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """C(a) v without assembling the matrix."""
    ops = grid_operators(grid)
    cx_u, cy_u, cx_v, cy_v = _advection_coefficients(ops, a)
    v_u, v_v = ops.split(v)
    kv = np.concatenate([
        cx_u * (ops.dx_u @ v_u) + cy_u * (ops.dy_u @ v_u),
        cx_v * (ops.dx_v @ v_v) + cy_v * (ops.dy_v @ v_v),
    ])
    ktv = np.concatenate([
        ops.dx_u.T @ (cx_u * v_u) + ops.dy_u.T @ (cy_u * v_u),
        ops.dx_v.T @ (cx_v * v_v) + ops.dy_v.T @ (cy_v * v_v),
    ])
    return 0.5 * (kv - ktv)


def solve_neumann(grid: Grid, rhs: np.ndarray) -> np.ndarray:
    """Solve div(grad phi) = rhs (cell array) with homogeneous Neumann walls, mean(phi) = 0."""
    ops = grid_operators(grid)
    eig = ops.neumann_eigenvalues.copy()
    eig[0, 0] = 1.0
    coeffs = dctn(rhs, type=2, norm="ortho") / eig
    coeffs[0, 0] = 0.0
    return idctn(coeffs, type=2, norm="ortho")


def project_vector(grid: Grid, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete Leray projection of an interior-face vector; returns (Px, phi)."""
    ops = grid_operators(grid)
    div_x = (ops.divergence @ x).reshape(grid.n, grid.n)
    phi = solve_neumann(grid, div_x)
    px = x - ops.gradient @ phi.ravel()
    residual = float(np.max(np.abs(ops.divergence @ px))) if px.size else 0.0
    scale = max(1.0, float(np.max(np.abs(div_x))))
    if residual > PROJECTION_TOLERANCE * scale:
        raise SolverFailure("pressure Poisson solve did not reach tolerance", residual)
    return px, phi


# ===== Field-level operations =====

def _require_same_grid(*fields: FaceField) -> Grid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise DimensionError(f"grid mismatch: n={grid.n} vs n={f.grid.n}")
    return grid


def divergence(vel: FaceField) -> CellScalar:
    ops = grid_operators(vel.grid)
    return CellScalar(vel.grid, (ops.divergence @ vel.values).reshape(vel.grid.n, vel.grid.n))


def gradient(s: CellScalar) -> StaggeredVelocity:
    ops = grid_operators(s.grid)
    return StaggeredVelocity(s.grid, ops.gradient @ s.values.ravel())


def laplacian(vel: FaceField) -> StaggeredVelocity:
    ops = grid_operators(vel.grid)
    return StaggeredVelocity(vel.grid, ops.laplacian @ vel.values)


def convection(a: FaceField, v: FaceField) -> StaggeredVelocity:
    """Skew-symmetric (a . grad) v + (div a) v / 2."""
    grid = _require_same_grid(a, v)
    return StaggeredVelocity(grid, apply_convection(grid, a.values, v.values))


def trilinear_b(a: FaceField, v: FaceField, w: FaceField) -> float:
    """b(a, v, w) = <convection(a, v), w>."""
    grid = _require_same_grid(a, v, w)
    return grid.weight * float(apply_convection(grid, a.values, v.values) @ w.values)


def project_divergence_free(vel: FaceField) -> Tuple[StaggeredVelocity, CellScalar]:
    """Leray projection Pv = v - grad(phi); phi is returned mean-free."""
    px, phi = project_vector(vel.grid, vel.values)
    return StaggeredVelocity(vel.grid, px), CellScalar(vel.grid, phi, mean_zero=True)


def inner_l2(a: FaceField, b: FaceField) -> float:
    grid = _require_same_grid(a, b)
    return grid.weight * float(a.values @ b.values)


def norm_l2(vel: FaceField) -> float:
    return float(np.sqrt(max(inner_l2(vel, vel), 0.0)))


def norm_h1_semi(vel: FaceField) -> float:
    """Discrete H1_0 seminorm sqrt(-<laplacian(v), v>)."""
    ops = grid_operators(vel.grid)
    value = -vel.grid.weight * float(vel.values @ (ops.laplacian @ vel.values))
    return float(np.sqrt(max(value, 0.0)))


def max_divergence(vel: FaceField) -> float:
    return divergence(vel).max_abs()


def first_dirichlet_eigenvalue(grid: Grid) -> float:
    """Smallest eigenvalue of the discrete -laplacian (tends to 2 pi^2)."""
    return 2.0 * (4.0 / grid.weight) * np.sin(np.pi * grid.h / 2.0) ** 2


def random_divergence_free(
    grid: Grid,
    rng: np.random.Generator,
    smoothing: float = 0.0,
    amplitude: float = 1.0,
) -> StaggeredVelocity:
    """Random projected field with unit L2 norm times amplitude.

    smoothing > 0 damps high wavenumbers with (I - smoothing * laplacian)^-2
    before projecting.
    """
    x = rng.standard_normal(grid.dim)
    if smoothing > 0.0:
        ops = grid_operators(grid)
        lu = spla.splu((sp.identity(grid.dim) - smoothing * ops.laplacian).tocsc())
        x = lu.solve(lu.solve(x))
    px, _ = project_vector(grid, x)
    field = StaggeredVelocity(grid, px)
    norm = norm_l2(field)
    return field * (amplitude / norm) if norm > 0 else field


def discrete_curl(grid: Grid, psi: np.ndarray) -> StaggeredVelocity:
    """Velocity (d psi/dy, -d psi/dx) of a nodal stream function, shape (n+1, n+1).

    The result is divergence free to rounding; psi must vanish on the boundary.
    """
    n = grid.n
    if psi.shape != (n + 1, n + 1):
        raise DimensionError(f"psi: expected shape {(n + 1, n + 1)}, got {psi.shape}")
    u = (psi[:, 1:] - psi[:, :-1]) / grid.h
    v = -(psi[1:, :] - psi[:-1, :]) / grid.h
    return StaggeredVelocity.from_components(grid, u, v)


def vortex_mode(grid: Grid, amplitude: float = 1.0) -> StaggeredVelocity:
    """Single-cell vortex from psi = sin^2(pi x) sin^2(pi y), scaled to L2 norm amplitude."""
    nodes = np.arange(grid.n + 1) * grid.h
    x, y = np.meshgrid(nodes, nodes, indexing="ij")
    field = discrete_curl(grid, np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2)
    return field * (amplitude / norm_l2(field))
