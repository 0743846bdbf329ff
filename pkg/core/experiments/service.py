"""
Experiment Service

Runs one configured experiment and writes its artifacts:
- resolved_config.json, summary.json (sorted keys)
- CSV series and field snapshots
- error.json when the run fails (next to summary.json when a claim fails)

Exit codes: 0 success, 2 regime gate failed, 1 any other error or a failed claim.
"""

import glob
import json
import logging
import os
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from core.control.optimizer import make_problem, minimize, sample_rayleigh, solve_optimality_system
from core.control.problem import ControlSignal, OptimizerOptions, ProblemSpec
from core.control.steady import estimate_M
from core.errors import ClaimFailure, ConfigError, RegimeGateFailure, TurnpikeError
from core.flow.params import FlowParams, Trajectory
from core.flow.service import (
    energy_balance_residual,
    solve_steady,
    solve_unsteady,
    stabilization_experiment,
    steady_energy_bound,
)
from core.mesh.grid import FaceField, ForceField, Grid, StaggeredVelocity
from core.mesh.loader import read_field, write_field
from core.mesh.operators import first_dirichlet_eigenvalue, norm_l2, random_divergence_free, vortex_mode
from core.oseen.lq import minimize_lq_cg, solve_lq_optimality
from core.oseen.service import OseenContext, coercivity_constants, estimate_decay_rate
from core.turnpike.service import (
    TurnpikeSettings,
    fit_turnpike,
    gamma_convergence_experiment,
    turnpike_experiment,
)
from .loader import ExperimentConfig, parse_recipe

logger = logging.getLogger(__name__)

# Seed stream per recipe key, so that fields do not share random draws
RECIPE_STREAMS = {"target": 1, "target_control": 2, "control": 3, "y0": 4, "q0": 5}


def _to_builtin(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


class ExperimentRunner:
    """Dispatches a configured experiment and owns its output directory."""

    def __init__(self, config: ExperimentConfig, output_root: Optional[str] = None, threads: Optional[int] = None):
        """Initialize with a loaded config; output_root and threads fall back to the config."""
        self.config = config
        self.output_root = output_root or config.output_dir or "runs"
        self.threads = threads or config.threads
        self.output_dir: Optional[str] = None
        self.handlers: Dict[str, Callable[[], Dict[str, Any]]] = {
            "steady": self.run_steady,
            "evolve": self.run_evolve,
            "optimize": self.run_optimize,
            "lq": self.run_lq,
            "decay": self.run_decay,
            "stabilize": self.run_stabilize,
            "turnpike": self.run_turnpike,
            "gamma_convergence": self.run_gamma_convergence,
        }

    # ===== Output =====

    def _make_output_dir(self) -> str:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        base = os.path.join(self.output_root, f"{self.config.experiment}_{stamp}")
        path, suffix = base, 1
        while os.path.exists(path):
            path = f"{base}_{suffix}"
            suffix += 1
        os.makedirs(path)
        return path

    def write_json(self, name: str, data: Dict[str, Any]) -> str:
        path = os.path.join(self.output_dir, name)
        with open(path, "w") as f:
            json.dump(_to_builtin(data), f, indent=2, sort_keys=True)
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        path = os.path.join(self.output_dir, name)
        frame.to_csv(path, index=False, float_format="%.17g")
        return path

    def write_snapshot(self, name: str, field: FaceField, time: float = 0.0) -> str:
        return write_field(os.path.join(self.output_dir, "snapshots", f"{name}.csv"), field, time)

    def snapshot_indices(self, n_nodes: int) -> np.ndarray:
        """Up to config.snapshots node indices spread evenly over [0, n_nodes - 1]."""
        count = self.config.snapshots
        if count <= 0:
            return np.array([], dtype=int)
        return np.unique(np.linspace(0, n_nodes - 1, min(count, n_nodes)).round().astype(int))

    def write_trajectory(self, name: str, traj: Trajectory) -> None:
        times = traj.times
        for k in self.snapshot_indices(len(traj)):
            self.write_snapshot(f"{name}_{k:05d}", traj[k], float(times[k]))

    def write_control(self, name: str, control: ControlSignal) -> None:
        if control.kind == "steady":
            self.write_snapshot(name, control.field)
            return
        for k in self.snapshot_indices(control.n_nodes):
            self.write_snapshot(f"{name}_{k:05d}", control.node(k), float(k * control.dt))

    # ===== Fields and problem data =====

    @property
    def grid(self) -> Grid:
        return Grid(self.config.n)

    def optimizer_options(self) -> OptimizerOptions:
        return OptimizerOptions(max_iter=self.config.max_iter, tol=self.config.tol)

    def build_field(self, key: str, cls=StaggeredVelocity, auto: Optional[str] = None) -> Optional[FaceField]:
        """
        Field described by the recipe under `key`.

        Returns None for "none" (and for "auto" when no auto recipe is given).
        """
        recipe = self.config.values[key]
        kind, argument = parse_recipe(recipe)
        if kind == "auto":
            if auto is None:
                return None
            kind, argument = parse_recipe(auto)
        grid = self.grid

        if kind == "none":
            return None
        if kind == "zero":
            field: FaceField = StaggeredVelocity.zeros(grid)
        elif kind == "mode":
            field = vortex_mode(grid, float(argument))
        elif kind == "random":
            rng = np.random.default_rng([self.config.seed, RECIPE_STREAMS[key]])
            field = random_divergence_free(grid, rng, smoothing=grid.h, amplitude=float(argument))
        elif kind == "file":
            path = argument if os.path.isabs(argument) else os.path.join(self.config.base_dir, argument)
            if not os.path.exists(path):
                raise ConfigError(key, f"file not found: {path}")
            field, _ = read_field(path, cls=StaggeredVelocity, grid=grid)
        else:
            control = self.build_field("target_control", ForceField)
            params = self.config.flow_params()
            field = solve_steady(control, params, tol=self.config.steady_tol).y
            logger.info("constructed target from the steady state of target_control (|y|=%.4e)", norm_l2(field))

        if cls is ForceField and not isinstance(field, ForceField):
            return ForceField(grid, field.values)
        if cls is StaggeredVelocity and not isinstance(field, StaggeredVelocity):
            return StaggeredVelocity(grid, field.values)
        return field

    def build_spec(self, params: FlowParams, y0_auto: Optional[str] = "zero", q0_auto: Optional[str] = None) -> ProblemSpec:
        return ProblemSpec(
            target=self.build_field("target", ForceField),
            params=params,
            y0=self.build_field("y0", auto=y0_auto),
            q0=self.build_field("q0", auto=q0_auto),
            k=self.config.k,
            alpha=self.config.alpha,
            admissible_radius=self.config.admissible_radius,
        )

    def turnpike_settings(self) -> TurnpikeSettings:
        return TurnpikeSettings(
            perturbation=self.config.perturbation,
            offset=self.config.offset,
            epsilon=self.config.epsilon,
            tracking_gate=self.config.tracking_gate,
            decay_horizon=self.config.decay_horizon,
            decay_samples=max(1, self.config.samples),
            seed=self.config.seed,
            max_workers=self.threads,
            optimizer=self.optimizer_options(),
        )

    # ===== Experiments =====

    def run_steady(self) -> Dict[str, Any]:
        params = self.config.flow_params()
        control = self.build_field("control", ForceField)
        state = solve_steady(control, params, tol=self.config.steady_tol)
        self.write_snapshot("steady_y", state.y)
        self.write_csv("steady_history.csv", pd.DataFrame({
            "iteration": np.arange(len(state.history)), "residual": state.history,
        }))
        return {
            "state": state.summary(),
            "y_l2": norm_l2(state.y),
            "energy_bound": steady_energy_bound(state, control),
        }

    def run_evolve(self) -> Dict[str, Any]:
        params = self.config.flow_params()
        y0 = self.build_field("y0", auto="zero")
        control = ControlSignal.steady(self.build_field("control", ForceField))
        traj = solve_unsteady(y0, control, params)
        self.write_csv("trajectory.csv", traj.to_frame())
        self.write_trajectory("y", traj)
        return {
            "n_steps": params.n_steps,
            "final_l2": float(traj.norms_l2()[-1]),
            "final_h1": float(traj.norms_h1()[-1]),
            "max_divergence": traj.max_divergence(),
            "energy_balance_residual": energy_balance_residual(traj, control),
        }

    def run_optimize(self) -> Dict[str, Any]:
        params = self.config.flow_params()
        spec = self.build_spec(params)
        variant = self.config.variant
        if variant == "unsteady":
            _, _, report = solve_optimality_system(spec, self.optimizer_options())
        else:
            report = minimize(spec, variant, self.optimizer_options())
        self.write_csv("iterations.csv", report.to_frame())
        if isinstance(report.state, Trajectory):
            self.write_csv("trajectory.csv", report.state.to_frame())
            self.write_trajectory("y", report.state)
        else:
            self.write_snapshot("steady_y", report.state.y)
        self.write_control("control", report.control)

        summary = {"optimization": report.summary()}
        if self.config.samples > 0:
            problem = make_problem(spec, variant)
            quotients = sample_rayleigh(problem, report.control, self.config.samples, seed=self.config.seed)
            summary["rayleigh"] = {"min": float(quotients.min()), "mean": float(quotients.mean()), "samples": quotients}
        return summary

    def _base_flow(self, params: FlowParams) -> StaggeredVelocity:
        control = self.build_field("control", ForceField)
        return solve_steady(control, params, tol=self.config.steady_tol).y

    def run_lq(self) -> Dict[str, Any]:
        params = self.config.flow_params()
        ctx = OseenContext(ybar=self._base_flow(params), params=params)
        z0 = self.build_field("y0", auto="random:0.1")
        phi0 = self.build_field("q0")
        t_final = params.t_final
        z, phi = solve_lq_optimality(z0, phi0, ctx, t_final, kappa=self.config.k, tol=self.config.lq_tol)
        series = pd.DataFrame({"t": z.times, "z": z.norms_l2(), "phi": phi.norms_l2()})
        series["d"] = series["z"] + series["phi"]
        fit = fit_turnpike(series.set_index("t")["d"], t_final)
        self.write_csv("lq_series.csv", series)
        self.write_trajectory("z", z)

        _, z_cg, info = minimize_lq_cg(z0, phi0, ctx, t_final, kappa=self.config.k)
        scale = max(1.0, float(np.max(z.norms_l2())))
        return {
            "fit": fit.to_dict(),
            "cg_agreement": float(np.max(np.abs(z.as_array() - z_cg.as_array()))) / scale,
            "cg": info,
        }

    def run_decay(self) -> Dict[str, Any]:
        params = self.config.flow_params()
        ybar = self._base_flow(params)
        ctx = OseenContext(ybar=ybar, params=params)
        estimate = estimate_decay_rate(ctx, self.config.decay_horizon, max(1, self.config.samples), seed=self.config.seed)
        constants = coercivity_constants(ctx, seed=self.config.seed)
        if estimate.series is not None:
            self.write_csv("decay_series.csv", estimate.series)
        m_hat, _ = estimate_M(ybar, seed=self.config.seed)
        return {
            "decay": estimate.to_dict(),
            "stokes_rate": params.mu * first_dirichlet_eigenvalue(self.grid),
            "M_hat": m_hat,
            "coercivity": {"gamma": constants.gamma, "xi": constants.xi, "samples": constants.samples},
        }

    def run_stabilize(self) -> Dict[str, Any]:
        params = self.config.flow_params()
        y0 = self.build_field("y0", auto="zero")
        control = self.build_field("control", ForceField)
        fit = stabilization_experiment(y0, control, params)
        if fit.series is not None:
            self.write_csv("stabilization_series.csv", fit.series)
        return {"fit": fit.to_dict()}

    def run_turnpike(self) -> Dict[str, Any]:
        params = self.config.flow_params(t_final=self.config.horizons[0])
        spec = self.build_spec(params, y0_auto=None, q0_auto=None)
        report = turnpike_experiment(spec, self.config.horizons, self.turnpike_settings())
        for result in report.results:
            self.write_csv(f"distance_T{result.T:g}.csv", result.series.reset_index())
            self.write_csv(f"iterations_T{result.T:g}.csv", result.report.to_frame())
        self.write_snapshot("steady_y", report.steady.state.y)
        self.write_snapshot("steady_q", report.steady.adjoint)
        return self.check_claims(report)

    def run_gamma_convergence(self) -> Dict[str, Any]:
        params = self.config.flow_params(t_final=self.config.horizons[0])
        spec = self.build_spec(params)
        report = gamma_convergence_experiment(spec, self.config.horizons, self.turnpike_settings())
        self.write_csv("gamma_convergence.csv", report.to_frame())
        return self.check_claims(report)

    def check_claims(self, report) -> Dict[str, Any]:
        """Summary of a completed report; raises ClaimFailure carrying it when a claimed property fails."""
        summary = report.summary()
        failed = report.failed_claims()
        if failed:
            raise ClaimFailure(f"claims not shown: {', '.join(failed)}", failed, summary)
        return summary

    # ===== Entry point =====

    def run(self) -> int:
        """Run the configured experiment; returns the process exit code."""
        self.output_dir = self._make_output_dir()
        self.write_json("resolved_config.json", self.config.to_dict())
        logger.info("running %s into %s", self.config.experiment, self.output_dir)
        try:
            summary = self.handlers[self.config.experiment]()
        except RegimeGateFailure as exc:
            logger.warning("regime gate failed: %s", exc)
            self.write_json("error.json", {"type": "RegimeGateFailure", "message": str(exc), "diagnostics": exc.diagnostics})
            return 2
        except ClaimFailure as exc:
            logger.error("ClaimFailure: %s", exc)
            self.write_json("summary.json", {**exc.summary, "experiment": self.config.experiment})
            self.write_json("error.json", {"type": "ClaimFailure", "message": str(exc), "claims": exc.claims})
            return 1
        except TurnpikeError as exc:
            logger.error("%s: %s", type(exc).__name__, exc)
            record = {"type": type(exc).__name__, "message": str(exc)}
            for attribute in ("residual", "history", "key", "reason"):
                if hasattr(exc, attribute):
                    record[attribute] = getattr(exc, attribute)
            self.write_json("error.json", record)
            return 1
        except Exception as exc:
            logger.exception("unexpected failure")
            self.write_json("error.json", {"type": type(exc).__name__, "message": str(exc)})
            return 1
        summary["experiment"] = self.config.experiment
        self.write_json("summary.json", summary)
        return 0


# ===== Validation =====

def precheck(config: ExperimentConfig) -> List[Dict[str, str]]:
    """CFL and cheap regime checks on a loaded config; no solver is run."""
    diagnostics: List[Dict[str, str]] = []
    runner = ExperimentRunner(config)
    params = config.flow_params()

    scales = []
    for key in ("y0", "target"):
        kind, _ = parse_recipe(config.values[key])
        if kind in ("constructed", "auto", "none"):
            continue
        try:
            scales.append(runner.build_field(key).max_abs())
        except TurnpikeError as exc:
            diagnostics.append({"level": "error", "key": key, "message": str(exc)})
    velocity = max(scales, default=0.0)
    if params.cfl_number(velocity) > config.cfl:
        diagnostics.append({
            "level": "warning",
            "key": "dt",
            "message": f"CFL number {params.cfl_number(velocity):.3g} exceeds cfl={config.cfl}; "
                       f"dt should not exceed {params.max_stable_dt(velocity):.3g}",
        })

    if config.experiment in ("turnpike", "gamma_convergence"):
        if config.resolved_scheme() != "coupled":
            diagnostics.append({
                "level": "warning",
                "key": "pressure_scheme",
                "message": "steady reference is not a fixed point of the projection scheme",
            })
        kind, _ = parse_recipe(config.target)
        has_errors = any(d["level"] == "error" for d in diagnostics)
        if kind in ("mode", "random", "file") and not has_errors:
            m_hat, _ = estimate_M(runner.build_field("target"), seed=config.seed)
            if m_hat >= config.mu:
                diagnostics.append({
                    "level": "warning",
                    "key": "target",
                    "message": f"smallness gate likely to fail: M(target)={m_hat:.3g} >= mu={config.mu}",
                })
    return diagnostics


# ===== Plot data =====

def plot_data(run_dir: str, out_dir: Optional[str] = None, render: bool = False) -> List[str]:
    """
    Re-emit the series of a run directory as two-column-or-more extracts.

    Each CSV keeps its first column (time or iteration) and the numeric
    columns, drops incomplete rows and is written to out_dir (default
    <run_dir>/plot_data). render=True also writes semilog PNGs.
    """
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    out_dir = out_dir or os.path.join(run_dir, "plot_data")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for path in sorted(glob.glob(os.path.join(run_dir, "*.csv"))):
        frame = pd.read_csv(path)
        numeric = frame.select_dtypes(include=[np.number])
        if numeric.shape[1] < 2:
            continue
        extract = numeric.dropna()
        name = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(out_dir, f"{name}.csv")
        extract.to_csv(target, index=False, float_format="%.17g")
        written.append(target)
        if render:
            # Deferred: matplotlib is only needed when rendering.
            from ui.components.curves import render_semilog

            written.append(render_semilog(extract, os.path.join(out_dir, f"{name}.png"), title=name))
    return written
