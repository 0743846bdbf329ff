"""
Linearly implicit time step shared by the nonlinear, linearized and adjoint solvers.

One step maps a right-hand side r = y_k + dt f_k to the next velocity:

    A y* = r,   A = I - dt mu L + dt C(a)      (a = lagged advecting velocity)

followed either by the Leray projection y_{k+1} = P y* ("projection") or by
enforcing incompressibility inside the same solve ("coupled"):

    [ A        dt G   0 ] [ y ]   [ r ]
    [ dt G^T   0      e ] [ p ] = [ 0 ]
    [ 0        e^T    0 ] [ m ]   [ 0 ]

where e is the vector of ones (pins the pressure mean). In both cases the
step is y_{k+1} = S r with a linear map S, and `solve_transpose` applies S^T,
which is what the discrete adjoints need.
"""

import logging
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.errors import SolverFailure
from core.mesh.grid import Grid
from core.mesh.operators import convection_matrix, grid_operators, project_vector
from .params import FlowParams

logger = logging.getLogger(__name__)

# Divergence left by a coupled solve, relative to the right-hand side
COUPLED_DIVERGENCE_TOLERANCE = 1e-10


def momentum_matrix(grid: Grid, params: FlowParams, advecting: Optional[np.ndarray]) -> sp.csr_matrix:
    """A = I - dt mu L + dt C(advecting)."""
    ops = grid_operators(grid)
    mat = sp.identity(grid.dim, format="csr") - (params.dt * params.mu) * ops.laplacian
    if advecting is not None:
        mat = mat + params.dt * convection_matrix(grid, advecting)
    return mat.tocsr()


def saddle_matrix(grid: Grid, velocity_block: sp.spmatrix, pressure_weight: float) -> sp.csc_matrix:
    """[[V, w G, 0], [w G^T, 0, e], [0, e^T, 0]] with the pressure mean pinned by e."""
    ops = grid_operators(grid)
    g = pressure_weight * ops.gradient
    ones = sp.csr_matrix(np.ones((grid.n * grid.n, 1)))
    return sp.bmat(
        [[velocity_block, g, None], [g.T, None, ones], [None, ones.T, None]],
        format="csc",
    )


class ImplicitStep:
    """Factorized step operator for one advecting velocity (None for Stokes)."""

    def __init__(self, grid: Grid, params: FlowParams, advecting: Optional[np.ndarray] = None):
        self.grid = grid
        self.params = params
        self.scheme = params.pressure_scheme
        self.matrix = momentum_matrix(grid, params, advecting)
        self._n_cells = grid.n * grid.n
        if self.scheme == "coupled":
            self._lu = spla.splu(saddle_matrix(grid, self.matrix, params.dt))
        else:
            self._lu = spla.splu(self.matrix.tocsc())

    def _pad(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([x, np.zeros(self._n_cells + 1)])

    def solve(self, rhs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Apply the step to r; returns (y_next, y_star, pressure) with pressure as a cell array."""
        n = self.grid.n
        if self.scheme == "coupled":
            sol = self._lu.solve(self._pad(rhs))
            y_next = sol[: self.grid.dim]
            pressure = sol[self.grid.dim: self.grid.dim + self._n_cells].reshape(n, n)
            ops = grid_operators(self.grid)
            residual = float(np.max(np.abs(ops.divergence @ y_next))) if y_next.size else 0.0
            scale = max(1.0, float(np.max(np.abs(rhs)))) / self.grid.h
            if residual > COUPLED_DIVERGENCE_TOLERANCE * scale:
                raise SolverFailure("coupled step left a divergent velocity", residual)
            return y_next, y_next, pressure

        y_star = self._lu.solve(rhs)
        y_next, phi = project_vector(self.grid, y_star)
        return y_next, y_star, phi / self.params.dt

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        return self.solve(rhs)[0]

    def solve_transpose(self, lam: np.ndarray, extra: Optional[np.ndarray] = None) -> np.ndarray:
        """S^T lam, with `extra` added to the velocity right-hand side of the transposed solve.

        For the projection scheme this is A^-T (P lam + extra); for the coupled
        scheme it is the velocity part of K^-T [lam + extra; 0; 0].
        """
        if self.scheme == "coupled":
            rhs = lam if extra is None else lam + extra
            return self._lu.solve(self._pad(rhs), trans="T")[: self.grid.dim]
        rhs, _ = project_vector(self.grid, lam)
        if extra is not None:
            rhs = rhs + extra
        return self._lu.solve(rhs, trans="T")

    def residual(self, rhs: np.ndarray, y_next: np.ndarray, y_star: np.ndarray) -> float:
        """Relative residual of the equations one forward step solved."""
        scale = max(1.0, float(np.linalg.norm(rhs)))
        if self.scheme == "coupled":
            momentum, _ = project_vector(self.grid, self.matrix @ y_next - rhs)
            div = grid_operators(self.grid).divergence @ y_next
            return max(float(np.linalg.norm(momentum)), self.grid.h * float(np.linalg.norm(div))) / scale
        projected, _ = project_vector(self.grid, y_star)
        return max(
            float(np.linalg.norm(self.matrix @ y_star - rhs)),
            float(np.linalg.norm(projected - y_next)),
        ) / scale

    def transpose_residual(self, lam: np.ndarray, r: np.ndarray) -> float:
        """Relative residual of r = S^T lam."""
        scale = max(1.0, float(np.linalg.norm(lam)))
        if self.scheme == "coupled":
            momentum, _ = project_vector(self.grid, self.matrix.T @ r - lam)
            div = grid_operators(self.grid).divergence @ r
            return max(float(np.linalg.norm(momentum)), self.grid.h * float(np.linalg.norm(div))) / scale
        projected, _ = project_vector(self.grid, lam)
        return float(np.linalg.norm(self.matrix.T @ r - projected)) / scale


class SaddleSolve:
    """Factorized steady system [[J, G, 0], [G^T, 0, e], [0, e^T, 0]]."""

    def __init__(self, grid: Grid, velocity_block: sp.spmatrix):
        self.grid = grid
        self.velocity_block = velocity_block.tocsr()
        self._n_cells = grid.n * grid.n
        self._lu = spla.splu(saddle_matrix(grid, velocity_block, 1.0))

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Velocity and mean-free pressure (cell array) for a velocity right-hand side."""
        n, dim = self.grid.n, self.grid.dim
        padded = np.concatenate([rhs, np.zeros(self._n_cells + 1)])
        sol = self._lu.solve(padded, trans="T" if transpose else "N")
        y = sol[:dim]
        ops = grid_operators(self.grid)
        residual = float(np.max(np.abs(ops.divergence @ y))) if y.size else 0.0
        scale = max(1.0, float(np.max(np.abs(rhs)))) / self.grid.h
        if residual > COUPLED_DIVERGENCE_TOLERANCE * scale:
            raise SolverFailure("steady saddle solve left a divergent velocity", residual)
        return y, sol[dim: dim + self._n_cells].reshape(n, n)


@lru_cache(maxsize=8)
def stokes_step(params: FlowParams) -> ImplicitStep:
    """Step without convection; its factorization is shared between runs."""
    logger.debug("Factorizing Stokes step for n=%d, dt=%g, scheme=%s", params.n, params.dt, params.pressure_scheme)
    return ImplicitStep(params.grid, params, None)


def step_operator(params: FlowParams, y: np.ndarray) -> ImplicitStep:
    """Step operator advected by y, or the cached Stokes step when convection is off."""
    if not params.convection:
        return stokes_step(params)
    return ImplicitStep(params.grid, params, y)
