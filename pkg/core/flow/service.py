"""
Flow Service

Navier-Stokes solvers and their diagnostics:
- one semi-implicit step and full unsteady runs
- the discrete energy balance of a run
- steady solves by damped Picard iteration followed by Newton
- exponential stabilization toward a steady state
"""

import logging
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid

from core.control.problem import ControlSignal
from core.errors import DimensionError, NonConvergence
from core.fitting import DecayFit, fit_exponential_decay
from core.mesh.grid import CellScalar, ForceField, Grid, StaggeredVelocity
from core.mesh.operators import (
    apply_convection,
    convection_jacobian_matrix,
    convection_matrix,
    first_dirichlet_eigenvalue,
    grid_operators,
    norm_h1_semi,
    norm_l2,
    project_vector,
)
from .params import FlowParams, SteadyState, Trajectory
from .stepper import ImplicitStep, SaddleSolve, step_operator

logger = logging.getLogger(__name__)

# CFL number above which a step is flagged
CFL_WARNING = 1.0


# ===== Unsteady problem =====

def cfl_number(y: np.ndarray, params: FlowParams) -> float:
    max_velocity = float(np.max(np.abs(y))) if y.size else 0.0
    return params.cfl_number(max_velocity)


def advance(
    y: np.ndarray,
    force: np.ndarray,
    params: FlowParams,
    step: Optional[ImplicitStep] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, ImplicitStep]:
    """One step on raw vectors; returns (y_next, y_star, pressure, step operator)."""
    step = step or step_operator(params, y)
    y_next, y_star, pressure = step.solve(y + params.dt * force)
    return y_next, y_star, pressure, step


def step_ns(y: StaggeredVelocity, force: ForceField, params: FlowParams) -> StaggeredVelocity:
    """One linearly implicit Euler step of the Navier-Stokes equations."""
    grid = params.grid
    if y.grid != grid or force.grid != grid:
        raise DimensionError(f"fields do not live on the n={params.n} grid")
    cfl = cfl_number(y.values, params)
    if cfl > CFL_WARNING:
        logger.warning("CFL number %.3f exceeds %.1f (dt=%g, h=%g)", cfl, CFL_WARNING, params.dt, grid.h)
    y_next, _, _, _ = advance(y.values, force.values, params)
    return StaggeredVelocity(grid, y_next)


def solve_unsteady(
    y0: StaggeredVelocity,
    control: Optional[ControlSignal],
    params: FlowParams,
) -> Trajectory:
    """March from y0 over [0, T]; control None means no forcing."""
    grid = params.grid
    if y0.grid != grid:
        raise DimensionError(f"y0 lives on n={y0.grid.n}, params on n={params.n}")
    if control is None:
        control = ControlSignal.zeros(params, kind="steady")
    control.check_compatible(params)

    values = np.empty((params.n_steps + 1, grid.dim))
    values[0] = y0.values
    worst_cfl = 0.0
    for k in range(params.n_steps):
        worst_cfl = max(worst_cfl, cfl_number(values[k], params))
        values[k + 1], _, _, _ = advance(values[k], control.forcing(k), params)
    if worst_cfl > CFL_WARNING:
        logger.warning("CFL number reached %.3f during the run (dt=%g, h=%g)", worst_cfl, params.dt, grid.h)
    return Trajectory.from_array(values, params)


def energy_balance_residual(traj: Trajectory, control: Optional[ControlSignal] = None) -> float:
    """
    Max over t of |E(t) + mu int |grad y|^2 - E(0) - int <u, y>| with E = |y|^2 / 2.

    Integrals use the trapezoid rule on the time nodes; a time-varying control
    is evaluated at the nodes.
    """
    params = traj.params
    energy = 0.5 * traj.norms_l2() ** 2
    dissipation = params.mu * traj.norms_h1() ** 2
    if control is None:
        work = np.zeros(len(traj))
    else:
        control.check_compatible(params)
        weight = params.grid.weight
        work = np.array([
            weight * float(control.values[0 if control.kind == "steady" else k] @ traj[k].values)
            for k in range(len(traj))
        ])
    lhs = energy + cumulative_trapezoid(dissipation, dx=params.dt, initial=0.0)
    rhs = energy[0] + cumulative_trapezoid(work, dx=params.dt, initial=0.0)
    return float(np.max(np.abs(lhs - rhs)))


# ===== Steady problem =====

def steady_operator(grid: Grid, params: FlowParams, y: Optional[np.ndarray], newton: bool) -> sp.csr_matrix:
    """-mu L + C(y), plus E(y) for the Newton linearization."""
    mat = -params.mu * grid_operators(grid).laplacian
    if params.convection and y is not None:
        mat = mat + convection_matrix(grid, y)
        if newton:
            mat = mat + convection_jacobian_matrix(grid, y)
    return mat.tocsr()


def steady_residual(y: np.ndarray, u: np.ndarray, params: FlowParams) -> float:
    """L2 norm of P(-mu L y + C(y) y - u)."""
    grid = params.grid
    r = -params.mu * (grid_operators(grid).laplacian @ y) - u
    if params.convection:
        r = r + apply_convection(grid, y, y)
    pr, _ = project_vector(grid, r)
    return float(np.sqrt(grid.weight * (pr @ pr)))


def solve_steady(
    control: ForceField,
    params: FlowParams,
    initial: Optional[StaggeredVelocity] = None,
    tol: float = 1e-10,
    damping: float = 0.7,
    newton_switch: float = 1e-3,
    max_iter: int = 100,
) -> SteadyState:
    """
    Solve -mu L y + C(y) y + G p = u, div y = 0.

    Starts from the Stokes solution (or `initial`), runs damped Picard
    iterations on the Oseen linearization and switches to Newton once the
    residual drops below `newton_switch`. A final Newton step polishes the
    converged state.
    """
    grid = params.grid
    if control.grid != grid:
        raise DimensionError(f"control lives on n={control.grid.n}, params on n={params.n}")
    u = control.values

    if initial is None:
        y, p = SaddleSolve(grid, steady_operator(grid, params, None, newton=False)).solve(u)
    else:
        y, p = initial.values.copy(), np.zeros((grid.n, grid.n))
    residual = steady_residual(y, u, params)
    history: List[float] = [residual]

    iterations = 0
    while residual > tol:
        if iterations >= max_iter or not np.isfinite(residual) or residual > 1e8:
            raise NonConvergence(
                f"steady solve stopped at residual {residual:.3e} after {iterations} iterations",
                history,
            )
        newton = residual < newton_switch
        solver = SaddleSolve(grid, steady_operator(grid, params, y, newton=newton))
        if newton:
            y, p = solver.solve(u + apply_convection(grid, y, y))
        else:
            y_new, p = solver.solve(u)
            y = y + damping * (y_new - y)
        residual = steady_residual(y, u, params)
        history.append(residual)
        iterations += 1
        logger.debug("steady %s iteration %d: residual %.3e", "Newton" if newton else "Picard", iterations, residual)

    if params.convection and iterations > 0:
        solver = SaddleSolve(grid, steady_operator(grid, params, y, newton=True))
        y, p = solver.solve(u + apply_convection(grid, y, y))
        residual = steady_residual(y, u, params)
        history.append(residual)

    logger.info("steady solve converged: residual %.3e in %d iterations", residual, iterations)
    return SteadyState(
        y=StaggeredVelocity(grid, y),
        p=CellScalar(grid, p, mean_zero=True),
        residual=residual,
        params=params,
        iterations=iterations,
        history=history,
    )


def steady_energy_bound(state: SteadyState, control: ForceField) -> Dict[str, float]:
    """Compare |grad y| with |u| / (mu sqrt(lambda_1)), the discrete form of the steady estimate."""
    grid = state.params.grid
    lam1 = first_dirichlet_eigenvalue(grid)
    lhs = norm_h1_semi(state.y)
    rhs = norm_l2(control) / (state.params.mu * np.sqrt(lam1))
    return {
        "h1_norm": lhs,
        "bound": rhs,
        "ratio": lhs / rhs if rhs > 0 else 0.0,
        "ok": bool(lhs <= rhs * (1.0 + 5.0 * grid.h)),
        "smallness": norm_l2(control) / (np.sqrt(lam1) * state.params.mu ** 2),
    }


# ===== Stabilization =====

def stabilization_experiment(
    y0: StaggeredVelocity,
    steady_control: ForceField,
    params: FlowParams,
    window: Tuple[float, float] = (0.1, 0.9),
    skip_threshold: float = 1e-9,
) -> DecayFit:
    """
    Evolve y0 under a time-independent control and fit the decay of |y(t) - y_inf|.

    The run uses the coupled scheme, whose fixed point is the steady solution
    y_inf. The fit window is given as fractions of T.
    """
    if params.pressure_scheme != "coupled":
        logger.info("stabilization runs the coupled scheme; configured %r is overridden", params.pressure_scheme)
        params = replace(params, pressure_scheme="coupled")
    steady = solve_steady(steady_control, params)
    traj = solve_unsteady(y0, ControlSignal.steady(steady_control), params)
    errors = traj.distance_to(steady.y)
    t_final = params.t_final
    diagnostics = {
        "smallness_ratio": norm_h1_semi(steady.y) / params.mu,
        "steady_residual": steady.residual,
        "initial_distance": float(errors[0]),
        "final_distance": float(errors[-1]),
    }

    if errors[0] <= skip_threshold:
        fit = DecayFit(
            rate=float("nan"), intercept=float("nan"), fit_residual=0.0,
            window=(window[0] * t_final, window[1] * t_final), n_points=0,
            envelope_ok=bool(np.all(errors <= skip_threshold)), monotone=True, skipped=True,
        )
        fit.series = traj.to_frame().assign(e=errors)
        fit.diagnostics.update(diagnostics)
        return fit

    fit = fit_exponential_decay(traj.times, errors, (window[0] * t_final, window[1] * t_final))
    fit.series = traj.to_frame().assign(e=errors)
    fit.diagnostics.update(diagnostics)
    if not fit.ok:
        logger.warning("stabilization outside the decay regime: %s", fit.diagnostics.get("reason"))
    return fit
