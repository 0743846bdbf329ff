"""
Unit tests for core/oseen module.

Tests:
1. Linearized step: linearity, Stokes limit, exact adjoint
2. Decay-rate oracle on the Stokes operator and its fit window
3. Coercivity constants
4. LQ problem: gradient, sweeps against conjugate gradients, Riccati action, turnpike
"""

import numpy as np
import pandas as pd
import pytest

from core.control.problem import ControlSignal
from core.flow.params import FlowParams
from core.flow.service import step_ns
from core.mesh.grid import ForceField, Grid, StaggeredVelocity
from core.mesh.operators import inner_l2, norm_l2, random_divergence_free, vortex_mode
from core.oseen.lq import LQProblem, lq_cost, lq_gradient, minimize_lq_cg, riccati_action, solve_lq_optimality
from core.oseen.service import (
    OseenContext,
    coercivity_constants,
    decay_window,
    estimate_decay_rate,
    step_oseen,
    step_oseen_adjoint,
)
from core.turnpike.service import fit_turnpike


def make_context(n=8, mu=0.1, dt=0.05, amplitude=0.05, scheme="projection", t_final=1.0):
    params = FlowParams(mu=mu, dt=dt, t_final=t_final, n=n, pressure_scheme=scheme)
    ybar = vortex_mode(params.grid, amplitude) if amplitude > 0 else StaggeredVelocity.zeros(params.grid)
    return OseenContext(ybar=ybar, params=params)


class TestOseenStep:
    """Test the linearized step and its adjoint."""

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_adjoint_identity(self, scheme, rng):
        ctx = make_context(n=16, amplitude=0.3, scheme=scheme)
        grid = ctx.grid
        zero = ForceField.zeros(grid)
        for _ in range(5):
            w = random_divergence_free(grid, rng)
            q = StaggeredVelocity(grid, rng.standard_normal(grid.dim))
            lhs = inner_l2(step_oseen(w, zero, ctx), q)
            rhs = inner_l2(w, step_oseen_adjoint(q, zero, ctx))
            assert abs(lhs - rhs) <= 1e-10 * norm_l2(w) * norm_l2(q)

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_step_is_linear(self, scheme, rng):
        ctx = make_context(n=16, amplitude=0.3, scheme=scheme)
        grid = ctx.grid
        w1, w2 = random_divergence_free(grid, rng), random_divergence_free(grid, rng)
        f1, f2 = ForceField(grid, rng.standard_normal(grid.dim)), ForceField(grid, rng.standard_normal(grid.dim))
        combined = step_oseen(w1 * 2.0 + w2 * -0.5, ForceField(grid, 2.0 * f1.values - 0.5 * f2.values), ctx)
        separate = step_oseen(w1, f1, ctx) * 2.0 + step_oseen(w2, f2, ctx) * -0.5
        assert norm_l2(combined - separate) <= 1e-10 * norm_l2(separate)

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_zero_base_flow_matches_stokes_step(self, scheme, rng):
        ctx = make_context(n=16, amplitude=0.0, scheme=scheme)
        grid = ctx.grid
        stokes = FlowParams(mu=0.1, dt=0.05, t_final=1.0, n=16, pressure_scheme=scheme, convection=False)
        w = random_divergence_free(grid, rng)
        f = ForceField(grid, rng.standard_normal(grid.dim))
        expected = step_ns(w, f, stokes)
        assert norm_l2(step_oseen(w, f, ctx) - expected) <= 1e-12 * norm_l2(expected)

    def test_zero_base_flow_adjoint_is_forward(self, rng):
        ctx = make_context(n=16, amplitude=0.0, scheme="coupled")
        grid = ctx.grid
        zero = ForceField.zeros(grid)
        q = StaggeredVelocity(grid, rng.standard_normal(grid.dim))
        forward = step_oseen(q, zero, ctx)
        assert norm_l2(step_oseen_adjoint(q, zero, ctx) - forward) <= 1e-12 * norm_l2(forward)

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_backward_norm_never_grows(self, scheme, rng):
        ctx = make_context(n=8, mu=0.2, amplitude=0.02, scheme=scheme)
        grid = ctx.grid
        zero = ForceField.zeros(grid)
        q = StaggeredVelocity(grid, rng.standard_normal(grid.dim))
        norms = [norm_l2(q)]
        for _ in range(20):
            q = step_oseen_adjoint(q, zero, ctx)
            norms.append(norm_l2(q))
        assert np.all(np.diff(norms) <= 1e-14 * np.array(norms[:-1]))

    def test_zero_base_flow_is_stokes(self):
        ctx = make_context(amplitude=0.0)
        assert not ctx.linearized
        assert ctx.jacobian is None

    def test_rejects_divergent_base_flow(self, rng):
        params = FlowParams(mu=0.1, dt=0.05, t_final=1.0, n=8)
        ybar = StaggeredVelocity(params.grid, rng.standard_normal(params.grid.dim))
        with pytest.raises(ValueError, match="ybar"):
            OseenContext(ybar=ybar, params=params)


class TestDecayRate:
    """Test the Stokes decay oracle."""

    def test_stokes_rate_bounded_below(self):
        ctx = make_context(n=16, mu=0.1, dt=0.0025, amplitude=0.0)
        estimate = estimate_decay_rate(ctx, 4.0, n_samples=2, smoothing=ctx.grid.h)
        assert estimate.decaying
        assert estimate.sigma >= 0.9 * 0.1 * 2 * np.pi ** 2

    def test_grid_consistency(self):
        rates = []
        for n in (16, 32):
            ctx = make_context(n=n, mu=0.1, dt=0.0025, amplitude=0.0)
            rates.append(estimate_decay_rate(ctx, 4.0, n_samples=2, smoothing=ctx.grid.h).sigma)
        assert abs(rates[0] - rates[1]) <= 0.05 * rates[1]

    def test_rate_scales_with_viscosity(self):
        rates = []
        for mu in (0.1, 0.2):
            ctx = make_context(n=16, mu=mu, dt=0.0025, amplitude=0.0)
            rates.append(estimate_decay_rate(ctx, 4.0, n_samples=2, smoothing=ctx.grid.h).sigma)
        assert rates[1] / rates[0] == pytest.approx(2.0, rel=0.03)

    @pytest.mark.slow
    def test_grid_consistency_fine(self):
        rates = []
        for n in (32, 64):
            ctx = make_context(n=n, mu=0.1, dt=0.0025, amplitude=0.0)
            rates.append(estimate_decay_rate(ctx, 4.0, n_samples=2, smoothing=ctx.grid.h).sigma)
        assert abs(rates[0] - rates[1]) <= 0.02 * rates[1]
        # first Stokes eigenvalue of the unit square is 52.3
        assert rates[1] == pytest.approx(0.1 * 52.3, rel=0.03)

    def test_window_cut_at_floor(self):
        times = np.arange(41.0)
        mask = decay_window(times, np.exp(-times), 40.0)
        assert times[mask].min() == 16.0
        assert times[mask].max() == 32.0
        assert mask.sum() == 17

    def test_window_without_floor(self):
        times = np.arange(41.0)
        mask = decay_window(times, np.ones_like(times), 40.0)
        assert times[mask].min() == 20.0
        assert mask.sum() == 21

    def test_fast_decay_fits_before_floor(self):
        ctx = make_context(n=8, mu=0.5, dt=0.05, amplitude=0.0)
        short = estimate_decay_rate(ctx, 1.5, n_samples=2)
        long = estimate_decay_rate(ctx, 8.0, n_samples=2)
        assert long.decaying
        assert long.window_points >= 10
        assert np.isfinite(long.sigma)
        assert long.sigma == pytest.approx(short.sigma, rel=0.02)

    def test_too_few_points_above_floor(self):
        ctx = make_context(n=8, mu=0.5, dt=1.0, amplitude=0.0, t_final=40.0)
        with pytest.raises(ValueError, match="^dt:"):
            estimate_decay_rate(ctx, 40.0, n_samples=1)

    def test_horizon_too_short(self):
        ctx = make_context(dt=0.1, amplitude=0.0)
        with pytest.raises(ValueError, match="horizon"):
            estimate_decay_rate(ctx, 1.0)


class TestCoercivity:
    """Test the measured Garding constants."""

    def test_stokes_needs_no_shift(self):
        constants = coercivity_constants(make_context(amplitude=0.0), n_samples=10)
        assert constants.gamma == 0.0
        assert constants.xi == pytest.approx(0.05)

    def test_shift_nonnegative_with_base_flow(self):
        constants = coercivity_constants(make_context(amplitude=0.5), n_samples=10)
        assert constants.gamma >= 0.0


class TestLQ:
    """Test the linear-quadratic problem around a base flow."""

    T = 2.0

    def setup_problem(self, rng):
        ctx = make_context(n=8, mu=0.1, dt=0.1, amplitude=0.05, t_final=self.T)
        z0 = random_divergence_free(ctx.grid, rng, smoothing=ctx.grid.h, amplitude=0.1)
        phi0 = random_divergence_free(ctx.grid, rng, smoothing=ctx.grid.h, amplitude=0.05)
        return ctx, z0, phi0

    def test_gradient_matches_finite_differences(self, rng):
        ctx, z0, phi0 = self.setup_problem(rng)
        params = ctx.params.with_horizon(self.T)
        v = ControlSignal("time_varying", ctx.grid, 0.1 * rng.standard_normal((params.n_steps + 1, ctx.grid.dim)), params.dt)
        grad = lq_gradient(v, z0, phi0, ctx, self.T)
        eps = 1e-5
        for _ in range(3):
            d = v.like(rng.standard_normal(v.values.shape))
            d = d * (1.0 / d.norm())
            fd = (lq_cost(v + d * eps, z0, phi0, ctx, self.T) - lq_cost(v - d * eps, z0, phi0, ctx, self.T)) / (2 * eps)
            assert fd == pytest.approx(grad.inner(d), rel=1e-6, abs=1e-12)

    def test_sweeps_agree_with_conjugate_gradients(self, rng):
        ctx, z0, phi0 = self.setup_problem(rng)
        z, phi = solve_lq_optimality(z0, phi0, ctx, self.T, kappa=1.0, tol=1e-12)
        _, z_cg, info = minimize_lq_cg(z0, phi0, ctx, self.T, kappa=1.0)
        assert info["info"] == 0
        difference = np.abs(z.as_array() - z_cg.as_array()).max()
        assert difference <= 1e-6 * np.abs(z.as_array()).max()

    def test_sweep_solution_is_stationary(self, rng):
        ctx, z0, phi0 = self.setup_problem(rng)
        _, phi = solve_lq_optimality(z0, phi0, ctx, self.T, kappa=1.0, tol=1e-12)
        problem = LQProblem(ctx, self.T, z0, phi0, 1.0)
        v = problem.zero().like(-phi.as_array())
        assert problem.gradient(v).norm() <= 1e-8 * max(1.0, v.norm())

    def test_riccati_action_is_linear(self, rng):
        ctx, z0, _ = self.setup_problem(rng)
        once = riccati_action(z0, ctx, self.T, tol=1e-12)
        twice = riccati_action(z0 * 2.0, ctx, self.T, tol=1e-12)
        assert norm_l2(twice - once * 2.0) <= 1e-8 * norm_l2(twice)

    def test_riccati_horizon_differences_shrink(self, rng):
        ctx = make_context(n=8, mu=0.05, dt=0.05, amplitude=0.0, t_final=2.0)
        z0 = vortex_mode(ctx.grid, 0.1)
        actions = [riccati_action(z0, ctx, T, tol=1e-12) for T in (0.5, 1.0, 2.0)]
        first, second = norm_l2(actions[1] - actions[0]), norm_l2(actions[2] - actions[1])
        assert second < first

    @pytest.mark.slow
    def test_turnpike_on_fine_grid(self):
        ctx = make_context(n=16, mu=0.1, dt=0.05, amplitude=0.05, scheme="coupled", t_final=8.0)
        z0 = vortex_mode(ctx.grid, 0.1)
        phi0 = vortex_mode(ctx.grid, -0.1)
        z4, phi4 = solve_lq_optimality(z0, phi0, ctx, 4.0, kappa=1.0, tol=1e-12)
        z8, _ = solve_lq_optimality(z0, phi0, ctx, 8.0, kappa=1.0, tol=1e-12)

        d = pd.Series(z4.norms_l2() + phi4.norms_l2(), index=z4.times)
        fit = fit_turnpike(d, 4.0)
        assert fit.gamma > 0

        half = ctx.params.with_horizon(2.0).n_steps + 1
        change = max(norm_l2(z8[k] - z4[k]) for k in range(half)) / norm_l2(z0)
        assert change < np.exp(-2.0 * fit.gamma)

    def test_zero_data_gives_zero_solution(self):
        ctx = make_context(n=8, dt=0.1, amplitude=0.05, t_final=1.0)
        zero = StaggeredVelocity.zeros(ctx.grid)
        z, phi = solve_lq_optimality(zero, None, ctx, 1.0)
        assert np.all(z.as_array() == 0.0)
        assert np.all(phi.as_array() == 0.0)

    def test_rejects_nonpositive_kappa(self, rng):
        ctx, z0, phi0 = self.setup_problem(rng)
        with pytest.raises(ValueError, match="kappa"):
            LQProblem(ctx, self.T, z0, phi0, kappa=0.0)


def test_grid_of_context_matches_params():
    ctx = make_context(n=16)
    assert ctx.grid == Grid(16)
