"""
Control Optimizer

Projected gradient descent with Armijo backtracking and L-BFGS directions for
the unsteady, steady and time-independent tracking problems, plus:
- projection onto the admissible ball U_ad
- the coupled optimality system of the unsteady problem, certified
- Rayleigh quotients of the Hessian along random directions
"""

import logging
from typing import List, Optional, Tuple, Union

import numpy as np

from core.flow.params import Trajectory
from core.mesh.grid import StaggeredVelocity
from core.mesh.operators import random_divergence_free
from .problem import (
    VARIANTS,
    ControlSignal,
    OptimizationReport,
    OptimizerOptions,
    ProblemSpec,
)
from .steady import SteadyProblem
from .unsteady import EvolutionProblem

logger = logging.getLogger(__name__)

Problem = Union[EvolutionProblem, SteadyProblem]


def make_problem(spec: ProblemSpec, variant: str) -> Problem:
    if variant == "unsteady":
        return EvolutionProblem(spec)
    if variant == "time_independent":
        return EvolutionProblem(spec, time_independent=True)
    if variant == "steady":
        return SteadyProblem(spec)
    raise ValueError(f"variant: expected one of {VARIANTS}, got {variant!r}")


def project_admissible(u: ControlSignal, radius: Optional[float]) -> ControlSignal:
    """Projection onto {|u(t)| <= radius}; per time node for time-varying controls."""
    if radius is None:
        return u
    norms = u.node_norms()
    scale = np.where(norms > radius, radius / np.maximum(norms, 1e-300), 1.0)
    if np.all(scale == 1.0):
        return u
    return u.like(u.values * scale[:, None])


def first_order_residual(
    u: ControlSignal,
    grad: ControlSignal,
    radius: Optional[float],
    penalty_weight: float,
) -> float:
    """|u - P(u - grad)| relative to the adjoint part of the gradient; zero at a constrained optimum."""
    projected = u - project_admissible(u - grad, radius)
    q_part = grad - penalty_weight * u
    return projected.norm() / max(1.0, q_part.norm())


def _lbfgs_direction(
    grad: ControlSignal,
    memory: List[Tuple[ControlSignal, ControlSignal, float]],
    initial_scale: float,
) -> ControlSignal:
    """Two-loop recursion in the control inner product."""
    q = grad
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * s.inner(q)
        alphas.append(a)
        q = q - a * y
    if memory:
        s, y, _ = memory[-1]
        scale = s.inner(y) / y.inner(y)
    else:
        scale = initial_scale
    r = scale * q
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * y.inner(r)
        r = r + (a - b) * s
    return -r


def minimize(
    spec: ProblemSpec,
    variant: str = "unsteady",
    options: Optional[OptimizerOptions] = None,
    initial: Optional[ControlSignal] = None,
) -> OptimizationReport:
    """
    Minimize the tracking functional of `variant` over U_ad.

    Stops when the projected gradient |u - P(u - grad)| drops to options.tol.
    A line search that cannot find sufficient decrease above options.min_step
    ends the run with status "stalled".
    """
    options = options or OptimizerOptions()
    problem = make_problem(spec, variant)
    radius = spec.admissible_radius

    u = project_admissible(initial if initial is not None else problem.zero(), radius)
    breakdown, grad, adjoint = problem.gradient(u)
    memory: List[Tuple[ControlSignal, ControlSignal, float]] = []

    cost_history, grad_history, step_history = [], [], []
    tracking_history, penalty_history = [], []
    status, step = "max_iter", 0.0
    iterations = 0
    diagnostics = {}

    while True:
        projected = u - project_admissible(u - grad, radius)
        grad_norm = projected.norm()
        cost_history.append(breakdown.total)
        grad_history.append(grad_norm)
        step_history.append(step)
        tracking_history.append(breakdown.tracking)
        penalty_history.append(breakdown.penalty)
        logger.info("%s iteration %d: cost %.10e, projected gradient %.3e", variant, iterations, breakdown.total, grad_norm)

        if grad_norm <= options.tol:
            status = "converged"
            break
        if iterations >= options.max_iter:
            break

        direction = _lbfgs_direction(grad, memory, 1.0 / problem.penalty_weight())
        if direction.inner(grad) >= 0:
            memory.clear()
            direction = -(1.0 / problem.penalty_weight()) * grad

        step = 1.0
        accepted = None
        while step >= options.min_step:
            trial = project_admissible(u + step * direction, radius)
            trial_breakdown = problem.cost(trial)
            decrease = options.armijo * grad.inner(trial - u)
            if trial_breakdown.total <= min(breakdown.total + decrease, breakdown.total):
                accepted = (trial, trial_breakdown)
                break
            step *= options.backtrack

        if accepted is None:
            status = "stalled"
            diagnostics = {"last_step": step, "grad_norm": grad_norm, "cost": breakdown.total}
            logger.warning("%s line search stalled at iteration %d (projected gradient %.3e)", variant, iterations, grad_norm)
            break

        trial, _ = accepted
        new_breakdown, new_grad, new_adjoint = problem.gradient(trial)
        s_vec, y_vec = trial - u, new_grad - grad
        curvature = s_vec.inner(y_vec)
        if curvature > 1e-12 * s_vec.norm() * y_vec.norm():
            memory.append((s_vec, y_vec, 1.0 / curvature))
            if len(memory) > options.memory:
                memory.pop(0)
        u, breakdown, grad, adjoint = trial, new_breakdown, new_grad, new_adjoint
        iterations += 1

    first_order = first_order_residual(u, grad, radius, problem.penalty_weight())

    if isinstance(problem, EvolutionProblem):
        state = problem.trajectory(u)
        adjoint_out = problem.adjoint_trajectory(adjoint)
    else:
        state = problem.state(u)
        adjoint_out = StaggeredVelocity(problem.grid, adjoint)
        diagnostics["adjoint_bound"] = problem.adjoint_bound(u)

    return OptimizationReport(
        variant=variant,
        control=u,
        state=state,
        adjoint=adjoint_out,
        breakdown=breakdown,
        cost_history=cost_history,
        grad_norm_history=grad_history,
        step_history=step_history,
        tracking_history=tracking_history,
        penalty_history=penalty_history,
        first_order_residual=first_order,
        iterations=iterations,
        converged=status == "converged",
        status=status,
        diagnostics=diagnostics,
    )


def solve_optimality_system(
    spec: ProblemSpec,
    options: Optional[OptimizerOptions] = None,
    initial: Optional[ControlSignal] = None,
    tolerance: float = 1e-9,
    first_order_tolerance: float = 1e-6,
) -> Tuple[Trajectory, Trajectory, OptimizationReport]:
    """
    Solve the coupled state/adjoint system of the unsteady problem.

    At the fixed point u = -q / k the minimizer of the unsteady functional and
    the forward-backward system coincide; the returned pair is certified by the
    residuals of every forward and backward step equation.
    """
    report = minimize(spec, "unsteady", options, initial)
    residuals = EvolutionProblem(spec).certify(report.control)
    certified = (
        report.converged
        and residuals["forward_residual"] <= tolerance
        and residuals["backward_residual"] <= tolerance
        and report.first_order_residual <= first_order_tolerance
    )
    report.diagnostics.update(residuals)
    report.diagnostics["certified"] = bool(certified)
    if not certified:
        logger.warning("optimality system not certified: %s", residuals)
    return report.state, report.adjoint, report


def random_direction(problem: Problem, rng: np.random.Generator, smoothing: float = 0.0) -> ControlSignal:
    """Random divergence-free control direction of unit norm."""
    zero = problem.zero()
    rows = [random_divergence_free(problem.grid, rng, smoothing=smoothing).values for _ in range(zero.n_nodes)]
    v = zero.like(np.stack(rows))
    return v * (1.0 / v.norm())


def sample_rayleigh(
    problem: Problem,
    u: ControlSignal,
    n_samples: int = 20,
    seed: int = 0,
    smoothing: float = 0.0,
) -> np.ndarray:
    """<H v, v> / <v, v> along seeded random directions."""
    rng = np.random.default_rng(seed)
    quotients = []
    for _ in range(n_samples):
        v = random_direction(problem, rng, smoothing)
        quotients.append(problem.hessian_vec(u, v).inner(v) / v.inner(v))
    return np.array(quotients)
