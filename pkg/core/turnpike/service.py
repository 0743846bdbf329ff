"""
Turnpike Service

Experiment orchestration and metrology for long-horizon optimal control:
- distance of an optimal pair (y, q) to the steady optimal pair over time
- exponential fits d(t) ~ C (exp(-gamma t) + exp(-gamma (T - t)))
- gated horizon sweeps of the unsteady problem
- convergence of time-averaged optimal costs to the steady optimal cost
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from core.control.optimizer import minimize
from core.control.problem import ControlSignal, OptimizationReport, OptimizerOptions, ProblemSpec
from core.control.steady import estimate_M
from core.errors import DimensionError, NonConvergence, RegimeGateFailure, TurnpikeError
from core.fitting import fit_log_linear
from core.flow.params import Trajectory
from core.flow.service import solve_steady
from core.mesh.grid import StaggeredVelocity
from core.mesh.operators import norm_h1_semi, norm_l2, random_divergence_free, vortex_mode
from core.oseen.lq import solve_lq_optimality
from core.oseen.service import OseenContext, estimate_decay_rate

logger = logging.getLogger(__name__)

OFFSET_KINDS = ("random", "mode")


# ===== Distance and fit =====

def turnpike_distance(
    y_traj: Trajectory,
    q_traj: Optional[Trajectory],
    steady_pair: Tuple[StaggeredVelocity, Optional[StaggeredVelocity]],
) -> pd.DataFrame:
    """d(t_k) = |y(t_k) - ybar| + |q(t_k) - qbar| at every node, indexed by t."""
    ybar, qbar = steady_pair
    if ybar.grid != y_traj.grid:
        raise DimensionError("steady state and trajectory live on different grids")
    dist_y = y_traj.distance_to(ybar)
    if q_traj is None:
        dist_q = np.zeros_like(dist_y)
    else:
        if len(q_traj) != len(y_traj) or q_traj.grid != y_traj.grid:
            raise DimensionError("state and adjoint trajectories differ in horizon or grid")
        reference = qbar if qbar is not None else StaggeredVelocity.zeros(y_traj.grid)
        dist_q = q_traj.distance_to(reference)
    frame = pd.DataFrame({"d": dist_y + dist_q, "dist_y": dist_y, "dist_q": dist_q}, index=y_traj.times)
    frame.index.name = "t"
    return frame


@dataclass(frozen=True)
class FitOptions:
    edge: float = 0.05
    left: Tuple[float, float] = (0.05, 0.4)
    right: Tuple[float, float] = (0.6, 0.95)
    floor: float = 1e-14
    envelope: float = 1.1
    min_points: int = 10

    def __post_init__(self):
        if not 0 <= self.edge < 0.5:
            raise ValueError(f"edge: must lie in [0, 0.5), got {self.edge!r}")
        if not self.envelope >= 1:
            raise ValueError(f"envelope: must be >= 1, got {self.envelope!r}")


@dataclass
class TurnpikeFit:
    C: float
    gamma: float
    window: Tuple[float, float]
    max_relative_fit_residual: float
    n_points: int
    ok: bool
    C_envelope: float = float("nan")
    envelope_ratio: float = float("nan")
    envelope_ok: bool = False
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def model(self, t: np.ndarray, T: float) -> np.ndarray:
        return self.C * (np.exp(-self.gamma * t) + np.exp(-self.gamma * (T - t)))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["window"] = list(self.window)
        return data


def _failed_fit(window, n_points, reason, **extra) -> TurnpikeFit:
    logger.warning("turnpike fit failed: %s", reason)
    return TurnpikeFit(
        C=float("nan"), gamma=float("nan"), window=window, max_relative_fit_residual=float("nan"),
        n_points=n_points, ok=False, diagnostics={"reason": reason, **extra},
    )


def fit_turnpike(d: pd.Series, T: float, options: Optional[FitOptions] = None) -> TurnpikeFit:
    """
    Fit log d(t) against log C (exp(-gamma t) + exp(-gamma (T - t))).

    The fit uses nodes in [edge T, (1 - edge) T] with d above the floor. Two
    one-sided log-linear fits give the starting point of a Levenberg-Marquardt
    solve in (log C, log gamma). The envelope d <= 1.1 C (...) is checked on
    the window; C_envelope is the smallest C for which it holds.
    """
    options = options or FitOptions()
    t = np.asarray(d.index, dtype=float)
    values = np.asarray(d.values, dtype=float)
    window = (options.edge * T, (1.0 - options.edge) * T)
    eps = 1e-12 * max(1.0, T)
    in_window = (t >= window[0] - eps) & (t <= window[1] + eps)
    usable = in_window & (values > options.floor)
    n_points = int(usable.sum())
    if n_points < options.min_points:
        return _failed_fit(window, n_points, f"only {n_points} usable points in the fit window")

    left = usable & (t >= options.left[0] * T - eps) & (t <= options.left[1] * T + eps)
    right = usable & (t >= options.right[0] * T - eps) & (t <= options.right[1] * T + eps)
    if left.sum() < 2 or right.sum() < 2:
        return _failed_fit(window, n_points, "too few points for the one-sided fits")
    left_fit = fit_log_linear(t[left], values[left])
    right_fit = fit_log_linear(t[right], values[right])
    gamma_left, gamma_right = -left_fit.slope, right_fit.slope
    if max(gamma_left, gamma_right) <= 1e-12:
        return _failed_fit(
            window, n_points, "series does not decay away from the ends",
            gamma_left=gamma_left, gamma_right=gamma_right,
        )

    starts = []
    if gamma_left > 1e-12:
        starts.append((left_fit.intercept, gamma_left))
    if gamma_right > 1e-12:
        starts.append((right_fit.intercept + gamma_right * T, gamma_right))
    log_c0 = float(np.mean([s[0] for s in starts]))
    gamma0 = float(np.mean([s[1] for s in starts]))

    t_fit, log_d = t[usable], np.log(values[usable])

    def residuals(p: np.ndarray) -> np.ndarray:
        gamma = np.exp(p[1])
        return log_d - (p[0] + np.logaddexp(-gamma * t_fit, -gamma * (T - t_fit)))

    solution = least_squares(
        residuals, np.array([log_c0, np.log(gamma0)]), method="lm",
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000,
    )
    C, gamma = float(np.exp(solution.x[0])), float(np.exp(solution.x[1]))
    fit = TurnpikeFit(
        C=C, gamma=gamma, window=window, max_relative_fit_residual=float("nan"),
        n_points=n_points, ok=bool(solution.success and np.isfinite(gamma) and gamma > 0),
        diagnostics={"gamma_left": gamma_left, "gamma_right": gamma_right, "nfev": int(solution.nfev)},
    )
    model = fit.model(t, T)
    fit.max_relative_fit_residual = float(np.max(np.abs(values[usable] / model[usable] - 1.0)))
    floored = np.maximum(values, options.floor)
    fit.envelope_ratio = float(np.max(floored[in_window] / model[in_window]))
    fit.envelope_ok = fit.envelope_ratio <= options.envelope
    fit.C_envelope = C * max(1.0, fit.envelope_ratio / options.envelope)
    return fit


# ===== Turnpike experiment =====

@dataclass(frozen=True)
class TurnpikeSettings:
    """
    perturbation:   size of the offsets y0 - ybar and q0 - qbar, relative to |ybar|
                    (used only when the problem leaves y0 or q0 unset)
    offset:         "random" (smooth random field) or "mode" (single vortex)
    epsilon:        closeness gate on |y0 - ybar| + |q0 - qbar|, default 0.1 |ybar|
    tracking_gate:  largest accepted |ybar - x^d| / |x^d|
    """

    perturbation: float = 0.04
    offset: str = "random"
    epsilon: Optional[float] = None
    tracking_gate: float = 0.5
    decay_horizon: float = 4.0
    decay_samples: int = 2
    seed: int = 0
    max_workers: Optional[int] = None
    lq: bool = True
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    fit: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if self.offset not in OFFSET_KINDS:
            raise ValueError(f"offset: expected one of {OFFSET_KINDS}, got {self.offset!r}")
        if self.perturbation < 0:
            raise ValueError(f"perturbation: must be >= 0, got {self.perturbation!r}")


@dataclass
class HorizonResult:
    T: float
    fit: TurnpikeFit
    midpoint: float
    report: OptimizationReport
    series: pd.DataFrame = field(repr=False)

    def summary(self) -> Dict[str, Any]:
        return {
            "T": self.T,
            "fit": self.fit.to_dict(),
            "midpoint_distance": self.midpoint,
            "optimization": self.report.summary(),
        }


@dataclass
class TurnpikeReport:
    horizons: List[float]
    results: List[HorizonResult]
    gates: Dict[str, Any]
    steady: OptimizationReport
    midpoint_decreasing: bool
    gamma_spread: float
    lq_fit: Optional[TurnpikeFit] = None
    lq_disagreement: Optional[bool] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def summary(self) -> Dict[str, Any]:
        return {
            "horizons": self.horizons,
            "gates": self.gates,
            "steady": self.steady.summary(),
            "results": [r.summary() for r in self.results],
            "midpoints": [r.midpoint for r in self.results],
            "midpoint_decreasing": self.midpoint_decreasing,
            "gamma_spread": self.gamma_spread,
            "lq_fit": self.lq_fit.to_dict() if self.lq_fit is not None else None,
            "lq_disagreement": self.lq_disagreement,
            "diagnostics": self.diagnostics,
            "failed_claims": self.failed_claims(),
        }

    def failed_claims(self) -> List[str]:
        """Turnpike properties the run did not show: a fit per horizon and the shrinking midpoint."""
        failed = [f"fit_T{r.T:g}" for r in self.results if not r.fit.ok]
        if not self.midpoint_decreasing:
            failed.append("midpoint_decreasing")
        return failed


def _offset(reference: StaggeredVelocity, amplitude: float, rng: np.random.Generator, kind: str) -> StaggeredVelocity:
    if amplitude <= 0:
        return reference.copy()
    if kind == "mode":
        return reference + vortex_mode(reference.grid, amplitude)
    return reference + random_divergence_free(reference.grid, rng, smoothing=reference.grid.h, amplitude=amplitude)


def check_regime_gates(
    spec: ProblemSpec,
    ybar: StaggeredVelocity,
    qbar: StaggeredVelocity,
    y0: StaggeredVelocity,
    q0: StaggeredVelocity,
    settings: TurnpikeSettings,
) -> Dict[str, Any]:
    """Evaluate the smallness, tracking, stability and closeness hypotheses."""
    mu = spec.params.mu
    m_hat, _ = estimate_M(ybar, seed=settings.seed)
    target_norm = norm_l2(spec.target)
    tracking = norm_l2(ybar - spec.target) / target_norm if target_norm > 0 else 0.0
    ctx = OseenContext(ybar=ybar, params=spec.params, qbar=qbar)
    decay = estimate_decay_rate(ctx, settings.decay_horizon, settings.decay_samples, seed=settings.seed)
    epsilon = settings.epsilon if settings.epsilon is not None else 0.1 * norm_l2(ybar)
    closeness = norm_l2(y0 - ybar) + norm_l2(q0 - qbar)

    gates = {
        "M_hat": m_hat,
        "mu": mu,
        "smallness_ok": m_hat < mu,
        "tracking_residual": tracking,
        "tracking_ok": tracking <= settings.tracking_gate,
        "sigma": decay.sigma,
        "stability_ok": decay.decaying,
        "closeness": closeness,
        "epsilon": epsilon,
        "closeness_ok": closeness <= epsilon * (1.0 + 1e-12),
    }
    gates["passed"] = all(gates[k] for k in ("smallness_ok", "tracking_ok", "stability_ok", "closeness_ok"))
    return gates


def _solve_horizon(spec: ProblemSpec, T: float, initial_field, pair, settings: TurnpikeSettings) -> HorizonResult:
    spec_T = spec.with_horizon(T)
    initial = ControlSignal.constant(initial_field, spec_T.params)
    report = minimize(spec_T, "unsteady", settings.optimizer, initial)
    series = turnpike_distance(report.state, report.adjoint, pair)
    fit = fit_turnpike(series["d"], T, settings.fit)
    midpoint = float(series["d"].iloc[spec_T.params.n_steps // 2])
    logger.info("horizon T=%g: gamma=%.4f, C=%.3e, d(T/2)=%.3e", T, fit.gamma, fit.C, midpoint)
    return HorizonResult(T=float(T), fit=fit, midpoint=midpoint, report=report, series=series)


def turnpike_experiment(
    spec: ProblemSpec,
    horizons: Sequence[float],
    settings: Optional[TurnpikeSettings] = None,
) -> TurnpikeReport:
    """
    Steady optimal pair, regime gates, then one unsteady optimal pair per horizon.

    Raises RegimeGateFailure naming every violated hypothesis before any
    unsteady solve is attempted.
    """
    settings = settings or TurnpikeSettings()
    horizons = sorted(float(T) for T in horizons)
    if not horizons:
        raise ValueError("horizons: at least one horizon is required")
    if spec.params.pressure_scheme != "coupled":
        logger.warning("projection scheme: the steady pair is not an exact fixed point of the time stepper")

    steady_spec = replace(spec, alpha=spec.k)
    steady = minimize(steady_spec, "steady", settings.optimizer)
    if not steady.converged:
        raise RegimeGateFailure("steady optimality system did not converge", {"steady": steady.summary()})
    ybar = steady.state.y
    qbar = steady.adjoint
    ubar = steady.control.field

    rng = np.random.default_rng(settings.seed)
    amplitude = settings.perturbation * norm_l2(ybar)
    y0 = spec.y0 if spec.y0 is not None else _offset(ybar, amplitude, rng, settings.offset)
    q0 = spec.q0 if spec.q0 is not None else _offset(qbar, amplitude, rng, settings.offset)

    gates = check_regime_gates(spec, ybar, qbar, y0, q0, settings)
    logger.info("regime gates: %s", gates)
    if not gates["passed"]:
        failed = [k[: -len("_ok")] for k in ("smallness_ok", "tracking_ok", "stability_ok", "closeness_ok") if not gates[k]]
        raise RegimeGateFailure(f"regime gates failed: {', '.join(failed)}", gates)

    run_spec = replace(spec, y0=y0, q0=q0)
    pair = (ybar, qbar)
    workers = settings.max_workers or len(horizons)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_solve_horizon, run_spec, T, ubar, pair, settings) for T in horizons]
        results = sorted((f.result() for f in futures), key=lambda r: r.T)

    midpoints = [r.midpoint for r in results]
    midpoint_decreasing = all(b < a for a, b in zip(midpoints, midpoints[1:]))
    gamma_spread = float("nan")
    if len(results) >= 2 and results[-1].fit.ok and results[-2].fit.ok:
        gamma_spread = abs(results[-1].fit.gamma - results[-2].fit.gamma) / results[-1].fit.gamma

    report = TurnpikeReport(
        horizons=horizons, results=results, gates=gates, steady=steady,
        midpoint_decreasing=midpoint_decreasing, gamma_spread=gamma_spread,
    )

    if settings.lq:
        t_max = horizons[-1]
        ctx = OseenContext(ybar=ybar, params=run_spec.params.with_horizon(t_max), qbar=qbar)
        try:
            z, phi = solve_lq_optimality(y0 - ybar, q0 - qbar, ctx, t_max, kappa=spec.k)
            lq_series = pd.Series(z.norms_l2() + phi.norms_l2(), index=z.times)
            report.lq_fit = fit_turnpike(lq_series, t_max, settings.fit)
            nonlinear = results[-1].fit
            if report.lq_fit.ok and nonlinear.ok:
                ratio = max(nonlinear.gamma / report.lq_fit.gamma, report.lq_fit.gamma / nonlinear.gamma)
                report.lq_disagreement = ratio > 2.0
                report.diagnostics["gamma_ratio"] = ratio
                if report.lq_disagreement:
                    logger.warning("nonlinear and LQ rates differ by a factor %.2f", ratio)
        except NonConvergence as exc:
            report.diagnostics["lq_error"] = str(exc)
    return report


# ===== Time-averaged costs =====

@dataclass
class GammaConvergenceReport:
    horizons: List[float]
    averaged_costs: List[float]
    steady_cost: float
    control_gaps: List[float]
    cost_gaps: List[float]
    gaps_decreasing: bool
    control_gaps_nonincreasing: bool
    radius_ok: bool
    smallness_ratios: List[float] = field(default_factory=list)
    control_norms: List[float] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "T": self.horizons,
            "averaged_cost": self.averaged_costs,
            "cost_gap": self.cost_gaps,
            "control_gap": self.control_gaps,
            "control_norm": self.control_norms,
            "smallness_ratio": self.smallness_ratios,
        })

    def summary(self) -> Dict[str, Any]:
        return {**asdict(self), "failed_claims": self.failed_claims()}

    def failed_claims(self) -> List[str]:
        failed = [name for name in ("gaps_decreasing", "control_gaps_nonincreasing", "radius_ok") if not getattr(self, name)]
        if self.failures:
            failed.append("horizons")
        return failed


def _time_averaged(spec: ProblemSpec, T: float, options: OptimizerOptions):
    report = minimize(spec.with_horizon(T), "time_independent", options)
    steady = solve_steady(report.control.field, spec.params)
    return report, norm_h1_semi(steady.y) / spec.params.mu


def gamma_convergence_experiment(
    spec: ProblemSpec,
    horizons: Sequence[float],
    settings: Optional[TurnpikeSettings] = None,
    gap_tolerance: float = 1e-14,
) -> GammaConvergenceReport:
    """
    Compare I^T / T of the time-independent problem with the steady optimal cost I.

    Failed horizons are recorded and skipped; the monotonicity flags use the
    horizons that succeeded.
    """
    settings = settings or TurnpikeSettings()
    horizons = sorted(float(T) for T in horizons)
    if spec.q0 is not None:
        raise ValueError("q0: the time-independent problem has no terminal term")

    steady = minimize(replace(spec, alpha=spec.k), "steady", settings.optimizer)
    steady_cost = steady.breakdown.total
    u_inf = steady.control

    workers = settings.max_workers or len(horizons)
    outcomes: Dict[float, Any] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {T: pool.submit(_time_averaged, spec, T, settings.optimizer) for T in horizons}
        for T, future in futures.items():
            try:
                outcomes[T] = future.result()
            except TurnpikeError as exc:
                logger.warning("horizon T=%g failed: %s", T, exc)
                outcomes[T] = exc

    done, averaged, gaps, control_gaps, ratios, norms = [], [], [], [], [], []
    failures: Dict[str, str] = {}
    for T in horizons:
        outcome = outcomes[T]
        if isinstance(outcome, Exception):
            failures[str(T)] = str(outcome)
            continue
        report, ratio = outcome
        done.append(T)
        averaged.append(report.breakdown.total / T)
        gaps.append(abs(report.breakdown.total / T - steady_cost))
        control_gaps.append((report.control - u_inf).norm())
        norms.append(report.control.norm())
        ratios.append(ratio)

    def decreasing(series: List[float], strict: bool) -> bool:
        pairs = list(zip(series, series[1:]))
        if strict:
            return all(b < a or (a <= gap_tolerance and b <= gap_tolerance) for a, b in pairs)
        return all(b <= a + gap_tolerance for a, b in pairs)

    radius = spec.admissible_radius
    radius_ok = radius is None or all(n <= radius + 1e-12 for n in norms + [u_inf.norm()])
    return GammaConvergenceReport(
        horizons=done,
        averaged_costs=averaged,
        steady_cost=steady_cost,
        control_gaps=control_gaps,
        cost_gaps=gaps,
        gaps_decreasing=decreasing(gaps, strict=True),
        control_gaps_nonincreasing=decreasing(control_gaps, strict=False),
        radius_ok=radius_ok,
        smallness_ratios=ratios,
        control_norms=norms,
        failures=failures,
    )
