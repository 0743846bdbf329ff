"""
Unit tests for core/flow module.

Tests:
1. FlowParams validation
2. Time stepping: divergence, energy decay, coupled fixed point
3. Discrete energy balance under dt-halving
4. Steady solver and manufactured-solution convergence
5. Stabilization toward a steady state
"""

import logging

import numpy as np
import pytest

from core.control.problem import ControlSignal
from core.errors import DimensionError
from core.flow.manufactured import manufactured_solution
from core.flow.params import FlowParams, Trajectory
from core.flow.service import (
    energy_balance_residual,
    solve_steady,
    solve_unsteady,
    stabilization_experiment,
    steady_energy_bound,
    steady_residual,
    step_ns,
)
from core.mesh.grid import ForceField, Grid, StaggeredVelocity
from core.mesh.operators import max_divergence, norm_l2, random_divergence_free, vortex_mode


class TestFlowParams:
    """Test parameter validation."""

    @pytest.mark.parametrize("kwargs, key", [
        ({"mu": 0.0}, "mu"),
        ({"dt": -0.1}, "dt"),
        ({"t_final": 0.55}, "t_final"),
        ({"pressure_scheme": "spectral"}, "pressure_scheme"),
        ({"n": 10}, "n"),
    ])
    def test_invalid_values_name_the_field(self, kwargs, key):
        base = {"mu": 0.1, "dt": 0.1, "t_final": 1.0, "n": 8}
        base.update(kwargs)
        with pytest.raises(ValueError, match=f"^{key}:"):
            FlowParams(**base)

    def test_steps_and_times(self):
        params = FlowParams(mu=0.1, dt=0.05, t_final=1.0, n=8)
        assert params.n_steps == 20
        assert params.times[-1] == pytest.approx(1.0)
        assert params.with_horizon(2.0).n_steps == 40

    def test_trajectory_length_checked(self, small_params):
        with pytest.raises(DimensionError):
            Trajectory.from_array(np.zeros((3, small_params.grid.dim)), small_params)


class TestTimeStepping:
    """Test single steps and unsteady runs."""

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_rest_stays_at_rest(self, scheme):
        params = FlowParams(mu=0.1, dt=0.1, t_final=0.5, n=8, pressure_scheme=scheme)
        grid = params.grid
        y = step_ns(StaggeredVelocity.zeros(grid), ForceField.zeros(grid), params)
        assert y.max_abs() == 0.0

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_step_is_divergence_free(self, scheme, rng):
        params = FlowParams(mu=0.1, dt=0.05, t_final=0.5, n=16, pressure_scheme=scheme)
        grid = params.grid
        y0 = random_divergence_free(grid, rng, smoothing=grid.h, amplitude=0.5)
        force = ForceField(grid, rng.standard_normal(grid.dim))
        y1 = step_ns(y0, force, params)
        assert max_divergence(y1) <= 1e-10 * max(1.0, y1.max_abs() / grid.h)

    @pytest.mark.parametrize("scheme", ["projection", "coupled"])
    def test_unforced_energy_never_grows(self, scheme, rng):
        params = FlowParams(mu=0.05, dt=0.05, t_final=1.0, n=16, pressure_scheme=scheme)
        y0 = random_divergence_free(params.grid, rng, smoothing=params.grid.h, amplitude=1.0)
        norms = solve_unsteady(y0, None, params).norms_l2()
        assert np.all(np.diff(norms) <= 1e-14 * norms[:-1])

    def test_coupled_step_fixes_steady_state(self):
        params = FlowParams(mu=0.1, dt=0.05, t_final=0.5, n=16, pressure_scheme="coupled")
        force = vortex_mode(params.grid, 2.0).as_force()
        steady = solve_steady(force, params)
        y1 = step_ns(steady.y, force, params)
        assert norm_l2(y1 - steady.y) <= 1e-8 * max(1.0, norm_l2(steady.y))

    def test_mismatched_grid(self, small_params):
        with pytest.raises(DimensionError):
            step_ns(StaggeredVelocity.zeros(Grid(16)), ForceField.zeros(Grid(16)), small_params)


class TestEnergyBalance:
    """Test the discrete energy equality."""

    def test_residual_halves_with_dt(self):
        y0 = vortex_mode(Grid(16), 0.5)
        residuals = []
        for dt in (0.02, 0.01, 0.005):
            params = FlowParams(mu=0.1, dt=dt, t_final=1.0, n=16, pressure_scheme="coupled")
            traj = solve_unsteady(y0, None, params)
            residuals.append(energy_balance_residual(traj))
        ratios = [residuals[1] / residuals[0], residuals[2] / residuals[1]]
        for ratio in ratios:
            assert 0.4 <= ratio <= 0.65

    def test_forced_balance_is_small(self, rng):
        params = FlowParams(mu=0.1, dt=0.005, t_final=0.5, n=16, pressure_scheme="coupled")
        force = vortex_mode(params.grid, 1.0).as_force()
        control = ControlSignal.steady(force)
        traj = solve_unsteady(StaggeredVelocity.zeros(params.grid), control, params)
        energy = 0.5 * norm_l2(traj.final()) ** 2
        assert energy_balance_residual(traj, control) <= 0.1 * energy


class TestSteadySolver:
    """Test the steady Navier-Stokes solver."""

    def test_zero_control(self):
        params = FlowParams(mu=0.1, dt=0.1, t_final=1.0, n=16)
        state = solve_steady(ForceField.zeros(params.grid), params)
        assert state.residual <= 1e-10
        assert norm_l2(state.y) == 0.0

    @pytest.mark.parametrize("convection", [True, False])
    def test_residual_and_divergence(self, convection):
        params = FlowParams(mu=0.1, dt=0.1, t_final=1.0, n=16, convection=convection)
        force = vortex_mode(params.grid, 1.0).as_force()
        state = solve_steady(force, params)
        assert steady_residual(state.y.values, force.values, params) <= 1e-10
        assert max_divergence(state.y) <= 1e-10 * max(1.0, state.y.max_abs() / params.grid.h)

    def test_energy_bound_holds_for_small_data(self):
        params = FlowParams(mu=0.1, dt=0.1, t_final=1.0, n=16)
        force = vortex_mode(params.grid, 0.5).as_force()
        bound = steady_energy_bound(solve_steady(force, params), force)
        assert bound["ok"]
        assert bound["ratio"] <= 1.0 + 5.0 * params.grid.h

    def test_manufactured_h_convergence(self):
        solution = manufactured_solution(mu=0.5, amplitude=0.5)
        errors = []
        for n in (16, 32, 64):
            params = FlowParams(mu=0.5, dt=0.1, t_final=1.0, n=n)
            grid = params.grid
            state = solve_steady(solution.force(grid), params)
            errors.append(norm_l2(state.y - solution.velocity(grid)))
        assert 3.0 <= errors[0] / errors[1] <= 5.0
        assert 3.0 <= errors[1] / errors[2] <= 5.0


class TestUnsteadyConvergence:
    """Test first-order convergence in time on a manufactured solution."""

    def test_dt_halving(self):
        solution = manufactured_solution(mu=0.5, amplitude=0.5, time_profile="decaying")
        grid = Grid(16)
        finals = []
        for dt in (0.05, 0.025, 0.0125, 0.00625):
            params = FlowParams(mu=0.5, dt=dt, t_final=0.5, n=16, pressure_scheme="coupled")
            forces = [solution.force(grid, t) for t in params.times]
            control = ControlSignal.time_varying(forces, params)
            traj = solve_unsteady(solution.velocity(grid, 0.0), control, params)
            finals.append(traj.final())
        diffs = [norm_l2(finals[i] - finals[i + 1]) for i in range(3)]
        for ratio in (diffs[0] / diffs[1], diffs[1] / diffs[2]):
            assert 1.7 <= ratio <= 2.4

    @pytest.mark.slow
    def test_first_order_against_exact_solution(self):
        solution = manufactured_solution(mu=0.1, amplitude=0.1, time_profile="oscillating")
        grid = Grid(32)
        dts = np.array([0.1, 0.05, 0.025, 0.0125])
        errors = []
        for dt in dts:
            params = FlowParams(mu=0.1, dt=dt, t_final=1.0, n=32, pressure_scheme="coupled")
            forces = [solution.force(grid, t) for t in params.times]
            control = ControlSignal.time_varying(forces, params)
            traj = solve_unsteady(solution.velocity(grid, 0.0), control, params)
            errors.append(max(norm_l2(traj[k] - solution.velocity(grid, t)) for k, t in enumerate(params.times)))
        order = np.polyfit(np.log(dts), np.log(errors), 1)[0]
        assert 0.8 <= order <= 1.2
        assert errors[-1] < errors[0]


class TestStabilization:
    """Test exponential decay toward the steady state."""

    def test_stokes_rate_at_rest(self):
        params = FlowParams(mu=0.1, dt=0.05, t_final=2.0, n=16)
        y0 = vortex_mode(params.grid, 0.1)
        fit = stabilization_experiment(y0, ForceField.zeros(params.grid), params)
        assert fit.ok
        assert fit.rate >= 0.8 * 0.1 * 2 * np.pi ** 2
        assert fit.envelope_ok
        assert fit.monotone

    def test_small_steady_state(self):
        params = FlowParams(mu=0.1, dt=0.05, t_final=2.0, n=16)
        force = vortex_mode(params.grid, 0.05).as_force()
        fit = stabilization_experiment(vortex_mode(params.grid, 0.2), force, params)
        assert fit.ok
        assert fit.rate > 0
        assert fit.diagnostics["smallness_ratio"] < 1.0

    def test_start_at_steady_state_is_skipped(self):
        params = FlowParams(mu=0.1, dt=0.05, t_final=1.0, n=8)
        fit = stabilization_experiment(StaggeredVelocity.zeros(params.grid), ForceField.zeros(params.grid), params)
        assert fit.skipped
        assert fit.envelope_ok

    def test_scheme_override_is_logged(self, caplog):
        params = FlowParams(mu=0.1, dt=0.05, t_final=1.0, n=8, pressure_scheme="projection")
        zero = StaggeredVelocity.zeros(params.grid)
        with caplog.at_level(logging.INFO, logger="core.flow.service"):
            stabilization_experiment(zero, ForceField.zeros(params.grid), params)
        assert any("'projection' is overridden" in r.getMessage() for r in caplog.records)

        caplog.clear()
        coupled = FlowParams(mu=0.1, dt=0.05, t_final=1.0, n=8, pressure_scheme="coupled")
        with caplog.at_level(logging.INFO, logger="core.flow.service"):
            stabilization_experiment(zero, ForceField.zeros(params.grid), coupled)
        assert not any("overridden" in r.getMessage() for r in caplog.records)
