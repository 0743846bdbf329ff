"""
Steady tracking problem and the smallness functional M(y).

    J(u) = 1/2 |y(u) - x^d|^2 + alpha/2 |u|^2,   -mu L y + C(y) y + G p = u, div y = 0

The adjoint is the transpose of the Newton saddle system at the converged
state, so the gradient alpha u + q is exact for the discrete problem.
"""

import logging
from functools import lru_cache
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.errors import DimensionError
from core.flow.params import SteadyState
from core.flow.service import solve_steady, steady_operator
from core.flow.stepper import SaddleSolve
from core.mesh.grid import ForceField, Grid, StaggeredVelocity
from core.mesh.operators import (
    convection_jacobian_matrix,
    convection_matrix,
    first_dirichlet_eigenvalue,
    grid_operators,
    norm_h1_semi,
    norm_l2,
    random_divergence_free,
)
from .problem import ControlSignal, CostBreakdown, ProblemSpec

logger = logging.getLogger(__name__)


class SteadyProblem:
    """Steady tracking problem on one ForceField control."""

    kind = "steady"
    variant = "steady"

    def __init__(self, spec: ProblemSpec, tol: float = 1e-10):
        self.spec = spec
        self.params = spec.params
        self.grid = spec.grid
        self.tol = tol
        self._target = spec.target.values
        self._cached: Optional[Tuple[np.ndarray, SteadyState, SaddleSolve]] = None

    def zero(self) -> ControlSignal:
        return ControlSignal.zeros(self.params, kind="steady")

    def penalty_weight(self) -> float:
        return self.spec.alpha

    def _check_control(self, u: ControlSignal) -> None:
        if u.kind != "steady" or u.grid != self.grid:
            raise DimensionError("steady problem expects a steady control on its grid")

    def _solve(self, u: ControlSignal) -> Tuple[SteadyState, SaddleSolve]:
        if self._cached is not None and np.array_equal(self._cached[0], u.values):
            return self._cached[1], self._cached[2]
        state = solve_steady(u.field, self.params, tol=self.tol)
        jacobian = SaddleSolve(self.grid, steady_operator(self.grid, self.params, state.y.values, newton=True))
        self._cached = (u.values.copy(), state, jacobian)
        return state, jacobian

    def state(self, u: ControlSignal) -> SteadyState:
        return self._solve(u)[0]

    def _breakdown(self, u: ControlSignal, y: np.ndarray) -> CostBreakdown:
        diff = y - self._target
        tracking = 0.5 * self.grid.weight * float(diff @ diff)
        return CostBreakdown(tracking, 0.5 * self.spec.alpha * u.inner(u), 0.0)

    def cost(self, u: ControlSignal) -> CostBreakdown:
        self._check_control(u)
        state, _ = self._solve(u)
        return self._breakdown(u, state.y.values)

    def adjoint(self, u: ControlSignal) -> np.ndarray:
        state, jacobian = self._solve(u)
        q, _ = jacobian.solve(state.y.values - self._target, transpose=True)
        return q

    def gradient(self, u: ControlSignal) -> Tuple[CostBreakdown, ControlSignal, np.ndarray]:
        """Returns (cost, alpha u + q, q)."""
        self._check_control(u)
        state, _ = self._solve(u)
        q = self.adjoint(u)
        grad = u.like((self.spec.alpha * u.values[0] + q)[None, :])
        return self._breakdown(u, state.y.values), grad, q

    def hessian_vec(self, u: ControlSignal, v: ControlSignal) -> ControlSignal:
        self._check_control(u)
        self._check_control(v)
        _, jacobian = self._solve(u)
        q = self.adjoint(u)
        dy, _ = jacobian.solve(v.values[0])
        rhs = dy
        if self.params.convection:
            curvature = convection_matrix(self.grid, dy) + convection_jacobian_matrix(self.grid, dy)
            rhs = rhs - curvature.T @ q
        dq, _ = jacobian.solve(rhs, transpose=True)
        return v.like((self.spec.alpha * v.values[0] + dq)[None, :])

    def adjoint_bound(self, u: ControlSignal, seed: int = 0) -> Dict[str, Any]:
        """
        Measured constant of |q|_V <= c |y - x^d| / (mu - M(y)).

        Testing the adjoint equation with q gives the bound with c at most the
        discrete Poincare constant 1 / sqrt(lambda_1); "constant" is the c the
        computed pair needs and "holds" compares it with that limit. The bound
        only applies while M(y) < mu.
        """
        self._check_control(u)
        state, _ = self._solve(u)
        q = StaggeredVelocity(self.grid, self.adjoint(u))
        m_hat, _ = estimate_M(state.y, seed=seed)
        mu = self.params.mu
        residual = norm_l2(state.y - StaggeredVelocity(self.grid, self._target))
        q_norm = norm_h1_semi(q)
        poincare = 1.0 / np.sqrt(first_dirichlet_eigenvalue(self.grid))
        applicable = m_hat < mu
        constant = None
        if applicable and residual > 0:
            constant = q_norm * (mu - m_hat) / residual
        return {
            "q_V": q_norm,
            "tracking_residual": residual,
            "M_hat": m_hat,
            "mu": mu,
            "applicable": applicable,
            "constant": constant,
            "poincare_constant": poincare,
            "holds": bool(applicable and (constant is None or constant <= poincare * (1.0 + 1e-8))),
        }


# ===== Function-style entry points =====

def cost_steady(u: ForceField, spec: ProblemSpec) -> CostBreakdown:
    return SteadyProblem(spec).cost(ControlSignal.steady(u))


def gradient_steady(u: ForceField, spec: ProblemSpec) -> ForceField:
    return SteadyProblem(spec).gradient(ControlSignal.steady(u))[1].field


def hessian_vec_steady(u: ForceField, v: ForceField, spec: ProblemSpec) -> ForceField:
    return SteadyProblem(spec).hessian_vec(ControlSignal.steady(u), ControlSignal.steady(v)).field


# ===== Smallness functional =====

@lru_cache(maxsize=8)
def _stokes_saddle(grid: Grid) -> SaddleSolve:
    return SaddleSolve(grid, -grid_operators(grid).laplacian)


def estimate_M(
    ybar: StaggeredVelocity,
    n_restarts: int = 4,
    max_iter: int = 100,
    tol: float = 1e-10,
    seed: int = 0,
) -> Tuple[float, StaggeredVelocity]:
    """
    Lower bound on M(y) = sup |b(v, v, y)| / |v|_V^2 over divergence-free v.

    b(v, v, y) = -<E(y) v, v>, so the ratio is a generalized Rayleigh quotient
    of the symmetric part of E(y) against -L on divergence-free fields. Each
    restart runs power iteration on the Stokes solve of that symmetric part
    from a seeded random field; the best quotient seen is returned with its
    field.
    """
    grid = ybar.grid
    best_value, best_field = 0.0, np.zeros(grid.dim)
    if ybar.max_abs() == 0.0:
        return 0.0, StaggeredVelocity(grid, best_field)

    e = convection_jacobian_matrix(grid, ybar.values)
    sym_part = (0.5 * (e + e.T)).tocsr()
    neg_lap = -grid_operators(grid).laplacian
    stokes = _stokes_saddle(grid)
    rng = np.random.default_rng(seed)

    def energy_norm(w: np.ndarray) -> float:
        return float(np.sqrt(max(w @ (neg_lap @ w), 0.0)))

    for restart in range(n_restarts):
        v = random_divergence_free(grid, rng).values
        v = v / energy_norm(v)
        previous = None
        for _ in range(max_iter):
            quotient = float(v @ (sym_part @ v)) / float(v @ (neg_lap @ v))
            if abs(quotient) > best_value:
                best_value, best_field = abs(quotient), v.copy()
            if previous is not None and abs(quotient - previous) <= tol * max(abs(quotient), 1e-300):
                break
            previous = quotient
            w, _ = stokes.solve(sym_part @ v)
            norm = energy_norm(w)
            if norm == 0.0:
                break
            v = w / norm
        logger.debug("estimate_M restart %d: best %.6e", restart, best_value)
    return best_value, StaggeredVelocity(grid, best_field)
