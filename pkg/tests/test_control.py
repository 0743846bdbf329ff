"""
Unit tests for core/control module.

Tests:
1. Adjoint gradients against central finite differences
2. Hessian-vector products and checkpointed backward passes
3. Optimizer: convergence, admissible set, optimality system
4. Smallness functional M(y)
5. A-priori bound on the steady adjoint
"""

import numpy as np
import pytest

from core.control.optimizer import (
    first_order_residual,
    make_problem,
    minimize,
    project_admissible,
    sample_rayleigh,
    solve_optimality_system,
)
from core.control.problem import ControlSignal, OptimizerOptions, ProblemSpec
from core.control.steady import SteadyProblem, cost_steady, estimate_M, gradient_steady, hessian_vec_steady
from core.control.unsteady import (
    EvolutionProblem,
    checkpoint_stride,
    cost_unsteady,
    gradient_unsteady,
    hessian_vec_unsteady,
)
from core.errors import DimensionError
from core.flow.params import FlowParams
from core.mesh.grid import ForceField, StaggeredVelocity
from core.mesh.operators import first_dirichlet_eigenvalue, norm_l2, random_divergence_free, vortex_mode


def make_spec(n=8, mu=0.1, dt=0.1, T=0.5, target_amplitude=0.05, **kwargs):
    params = FlowParams(mu=mu, dt=dt, t_final=T, n=n)
    target = vortex_mode(params.grid, target_amplitude).as_force()
    return ProblemSpec(target=target, params=params, **kwargs)


def random_control(problem, rng, scale=0.1):
    zero = problem.zero()
    return zero.like(scale * rng.standard_normal(zero.values.shape))


def unit_direction(problem, rng):
    d = random_control(problem, rng, 1.0)
    return d * (1.0 / d.norm())


def central_difference(problem, u, d, eps):
    return (problem.cost(u + d * eps).total - problem.cost(u - d * eps).total) / (2 * eps)


class TestGradients:
    """Test adjoint gradients against finite differences."""

    def test_unsteady_gradient(self, rng):
        grid = make_spec().grid
        spec = make_spec(y0=vortex_mode(grid, 0.3), q0=vortex_mode(grid, 0.02))
        problem = EvolutionProblem(spec)
        u = random_control(problem, rng)
        _, grad, _ = problem.gradient(u)
        for _ in range(5):
            d = unit_direction(problem, rng)
            fd = central_difference(problem, u, d, 1e-5)
            assert abs(fd - grad.inner(d)) <= 1e-6 * max(abs(fd), 1e-8)

    def test_time_independent_gradient(self, rng):
        grid = make_spec().grid
        spec = make_spec(y0=vortex_mode(grid, 0.3))
        problem = EvolutionProblem(spec, time_independent=True)
        u = random_control(problem, rng)
        _, grad, _ = problem.gradient(u)
        for _ in range(5):
            d = unit_direction(problem, rng)
            fd = central_difference(problem, u, d, 1e-5)
            assert abs(fd - grad.inner(d)) <= 1e-6 * max(abs(fd), 1e-8)

    def test_steady_gradient(self, rng):
        problem = SteadyProblem(make_spec(target_amplitude=0.3))
        u = random_control(problem, rng, 1.0)
        _, grad, _ = problem.gradient(u)
        for _ in range(5):
            d = unit_direction(problem, rng)
            fd = central_difference(problem, u, d, 1e-4)
            assert abs(fd - grad.inner(d)) <= 1e-7 * max(abs(fd), 1e-8)

    def test_function_entry_points(self, rng):
        spec = make_spec(target_amplitude=0.3)
        steady = SteadyProblem(spec)
        u = random_control(steady, rng)
        force = u.field
        assert cost_steady(force, spec).total == pytest.approx(steady.cost(u).total, rel=1e-12)
        assert isinstance(gradient_steady(force, spec), ForceField)
        assert isinstance(hessian_vec_steady(force, force, spec), ForceField)

        evolution = EvolutionProblem(spec)
        w = random_control(evolution, rng)
        assert cost_unsteady(w, spec).total == pytest.approx(evolution.cost(w).total, rel=1e-12)
        np.testing.assert_allclose(gradient_unsteady(w, spec).values, evolution.gradient(w)[1].values)
        assert hessian_vec_unsteady(w, w, spec).values.shape == w.values.shape


class TestHessian:
    """Test second-order products."""

    @pytest.mark.parametrize("variant", ["unsteady", "steady"])
    def test_hessian_symmetric(self, variant, rng):
        grid = make_spec().grid
        problem = make_problem(make_spec(y0=vortex_mode(grid, 0.3), target_amplitude=0.3), variant)
        u = random_control(problem, rng)
        v, w = unit_direction(problem, rng), unit_direction(problem, rng)
        hv, hw = problem.hessian_vec(u, v), problem.hessian_vec(u, w)
        assert abs(hv.inner(w) - v.inner(hw)) <= 1e-8 * max(1.0, abs(hv.inner(w)))

    @pytest.mark.parametrize("variant", ["unsteady", "time_independent", "steady"])
    def test_hessian_matches_gradient_differences(self, variant, rng):
        grid = make_spec().grid
        y0 = None if variant == "steady" else vortex_mode(grid, 0.3)
        problem = make_problem(make_spec(y0=y0, target_amplitude=0.3), variant)
        u = random_control(problem, rng)
        v = unit_direction(problem, rng)
        eps = 1e-4
        fd = (problem.gradient(u + v * eps)[1] - problem.gradient(u - v * eps)[1]) * (0.5 / eps)
        hv = problem.hessian_vec(u, v)
        assert (fd - hv).norm() <= 1e-5 * hv.norm()

    def test_checkpointing_gives_same_gradient(self, rng):
        grid = make_spec().grid
        spec = make_spec(T=1.0, y0=vortex_mode(grid, 0.3))
        full = EvolutionProblem(spec)
        windowed = EvolutionProblem(spec, checkpoint_threshold=2)
        u = random_control(full, rng)
        v = unit_direction(full, rng)
        assert checkpoint_stride(spec.params.n_steps, 2) > 1
        np.testing.assert_allclose(windowed.gradient(u)[1].values, full.gradient(u)[1].values, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(windowed.hessian_vec(u, v).values, full.hessian_vec(u, v).values, rtol=1e-12, atol=1e-15)

    def test_checkpoint_stride(self):
        assert checkpoint_stride(100) == 1
        assert checkpoint_stride(900) == 30


class TestOptimizer:
    """Test the projected L-BFGS optimizer."""

    def test_zero_data_converges_immediately(self):
        spec = make_spec(target_amplitude=0.0)
        report = minimize(spec, "unsteady")
        assert report.converged
        assert report.iterations == 0
        assert report.control.norm() == 0.0

    @pytest.mark.parametrize("variant", ["unsteady", "time_independent", "steady"])
    def test_first_order_residual(self, variant):
        grid = make_spec().grid
        y0 = None if variant == "steady" else vortex_mode(grid, 0.1)
        report = minimize(make_spec(T=1.0, y0=y0), variant, OptimizerOptions(tol=1e-9))
        assert report.converged
        assert report.first_order_residual <= 1e-6
        assert report.cost_history[-1] <= report.cost_history[0]
        assert list(report.to_frame().columns) == ["iter", "cost", "tracking", "penalty", "grad_norm", "step"]

    def test_admissible_radius_respected(self):
        spec = make_spec(target_amplitude=1.0, admissible_radius=0.05)
        report = minimize(spec, "unsteady", OptimizerOptions(max_iter=30))
        assert np.all(report.control.node_norms() <= 0.05 + 1e-12)

    def test_first_order_residual_uses_projected_gradient(self, rng):
        problem = SteadyProblem(make_spec())
        u = random_control(problem, rng)
        u = u * (0.05 / u.node_norms().max())
        outward = u * -2.0  # descent pushes u further out of the ball
        assert project_admissible(u - outward, 0.05).values == pytest.approx(u.values)
        assert first_order_residual(u, outward, 0.05, problem.penalty_weight()) == pytest.approx(0.0, abs=1e-15)
        assert first_order_residual(u, outward, None, problem.penalty_weight()) > 0

    def test_active_radius_residual_matches_projected_gradient(self):
        spec = make_spec(target_amplitude=1.0, admissible_radius=0.05)
        report = minimize(spec, "steady", OptimizerOptions(max_iter=30))
        _, grad, _ = SteadyProblem(spec).gradient(report.control)
        assert report.control.node_norms().max() == pytest.approx(0.05, rel=1e-6)
        assert report.first_order_residual <= report.grad_norm_history[-1] + 1e-15
        assert report.first_order_residual < 0.1 * grad.norm()

    def test_optimality_system_certified(self):
        grid = make_spec().grid
        spec = make_spec(T=1.0, y0=vortex_mode(grid, 0.1))
        state, adjoint, report = solve_optimality_system(spec, OptimizerOptions(tol=1e-10))
        assert report.diagnostics["certified"]
        assert len(state) == len(adjoint) == spec.params.n_steps + 1
        np.testing.assert_allclose(report.control.values, -adjoint.as_array() / spec.k, atol=1e-8)

    def test_hessian_positive_for_small_residual(self):
        grid = make_spec().grid
        spec = make_spec(T=1.0, y0=vortex_mode(grid, 0.05), target_amplitude=0.02)
        report = minimize(spec, "unsteady")
        problem = make_problem(spec, "unsteady")
        quotients = sample_rayleigh(problem, report.control, n_samples=20, seed=0, smoothing=grid.h)
        assert quotients.min() > 0.5


class TestSmallness:
    """Test the smallness functional M(y)."""

    def test_zero_field(self, grid8):
        value, _ = estimate_M(StaggeredVelocity.zeros(grid8))
        assert value == 0.0

    def test_homogeneous_of_degree_one(self, grid8, rng):
        y = random_divergence_free(grid8, rng, smoothing=grid8.h)
        value, field = estimate_M(y)
        tripled, _ = estimate_M(y * 3.0)
        assert value > 0
        assert tripled == pytest.approx(3.0 * value, rel=1e-9)
        assert norm_l2(field) > 0


class TestValidation:
    """Test input validation of problem specs and controls."""

    @pytest.mark.parametrize("kwargs, key", [
        ({"k": 0.0}, "k"),
        ({"alpha": -1.0}, "alpha"),
        ({"admissible_radius": 0.0}, "admissible_radius"),
    ])
    def test_invalid_weights(self, kwargs, key):
        with pytest.raises(ValueError, match=f"^{key}:"):
            make_spec(**kwargs)

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            make_problem(make_spec(), "adaptive")

    def test_time_independent_rejects_terminal_weight(self):
        grid = make_spec().grid
        with pytest.raises(ValueError, match="q0"):
            EvolutionProblem(make_spec(q0=vortex_mode(grid, 0.1)), time_independent=True)

    def test_wrong_control_kind(self):
        spec = make_spec()
        steady = ControlSignal.zeros(spec.params, kind="steady")
        with pytest.raises(DimensionError):
            EvolutionProblem(spec).cost(steady)

    def test_wrong_number_of_nodes(self):
        spec = make_spec()
        longer = ControlSignal.zeros(spec.params.with_horizon(1.0))
        with pytest.raises(DimensionError):
            EvolutionProblem(spec).gradient(longer)

    def test_invalid_options(self):
        with pytest.raises(ValueError, match="armijo"):
            OptimizerOptions(armijo=1.5)


class TestAdjointBound:
    """Test the a-priori bound on the steady adjoint."""

    def test_bound_at_optimum(self):
        spec = make_spec(mu=0.1, target_amplitude=0.05)
        report = minimize(spec, "steady", OptimizerOptions(tol=1e-10))
        bound = report.diagnostics["adjoint_bound"]
        assert bound["applicable"]
        assert bound["M_hat"] < bound["mu"]
        assert bound["holds"]
        assert bound["constant"] <= bound["poincare_constant"] * (1.0 + 1e-8)
        limit = bound["poincare_constant"] * bound["tracking_residual"] / (bound["mu"] - bound["M_hat"])
        assert 0 < bound["q_V"] <= limit * (1.0 + 1e-8)

    def test_bound_for_random_controls(self, rng):
        problem = SteadyProblem(make_spec(mu=0.1, target_amplitude=0.05))
        poincare = 1.0 / np.sqrt(first_dirichlet_eigenvalue(problem.grid))
        for _ in range(3):
            bound = problem.adjoint_bound(random_control(problem, rng, 0.02))
            assert bound["poincare_constant"] == pytest.approx(poincare)
            assert bound["holds"]

    def test_unsteady_report_has_no_bound(self):
        report = minimize(make_spec(target_amplitude=0.0), "unsteady")
        assert "adjoint_bound" not in report.diagnostics
