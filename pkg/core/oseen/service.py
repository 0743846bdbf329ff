"""
Oseen Service

Navier-Stokes dynamics linearized around a steady base flow ybar:
- forward and exactly adjoint steps of the linearized scheme
- decay-rate estimation from long random runs
- measured coercivity constants of the linearized operator

The linearized step is w_{k+1} = S (B w_k + dt f_k) with B = I - dt E(ybar)
and S the implicit step advected by ybar; its adjoint is q -> B^T S^T q.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp

from core.errors import DimensionError
from core.fitting import VALUE_FLOOR, fit_log_linear
from core.flow.params import FlowParams
from core.flow.stepper import ImplicitStep
from core.mesh.grid import ForceField, StaggeredVelocity
from core.mesh.operators import (
    convection_jacobian_matrix,
    grid_operators,
    max_divergence,
    norm_h1_semi,
    norm_l2,
    random_divergence_free,
)

logger = logging.getLogger(__name__)

# Largest divergence accepted in a base flow
BASE_FLOW_DIVERGENCE = 1e-8


@dataclass
class OseenContext:
    """Base flow (and optionally its steady adjoint) with the flow parameters."""

    ybar: StaggeredVelocity
    params: FlowParams
    qbar: Optional[StaggeredVelocity] = None

    def __post_init__(self):
        grid = self.params.grid
        for name in ("ybar", "qbar"):
            value = getattr(self, name)
            if value is not None and value.grid != grid:
                raise DimensionError(f"{name}: grid n={value.grid.n} does not match n={grid.n}")
        div = max_divergence(self.ybar)
        if div > BASE_FLOW_DIVERGENCE * max(1.0, self.ybar.max_abs() / grid.h):
            raise ValueError(f"ybar: not divergence free (max |div| = {div:.3e})")

    @property
    def grid(self):
        return self.params.grid

    @property
    def linearized(self) -> bool:
        """False when the base flow is zero or convection is switched off (Stokes)."""
        return self.params.convection and self.ybar.max_abs() > 0.0

    @cached_property
    def step(self) -> ImplicitStep:
        advecting = self.ybar.values if self.linearized else None
        return ImplicitStep(self.grid, self.params, advecting)

    @cached_property
    def jacobian(self) -> Optional[sp.csr_matrix]:
        return convection_jacobian_matrix(self.grid, self.ybar.values) if self.linearized else None

    def forward(self, w: np.ndarray, f: Optional[np.ndarray] = None) -> np.ndarray:
        dt = self.params.dt
        rhs = w if self.jacobian is None else w - dt * (self.jacobian @ w)
        if f is not None:
            rhs = rhs + dt * f
        return self.step.apply(rhs)

    def backward(self, q: np.ndarray, source: Optional[np.ndarray] = None) -> np.ndarray:
        r = self.step.solve_transpose(q)
        out = r if self.jacobian is None else r - self.params.dt * (self.jacobian.T @ r)
        if source is not None:
            out = out + self.params.dt * source
        return out


def step_oseen(w: StaggeredVelocity, f: ForceField, ctx: OseenContext) -> StaggeredVelocity:
    """One step of w_t - mu L w + C(ybar) w + C(w) ybar + G p = f."""
    if w.grid != ctx.grid or f.grid != ctx.grid:
        raise DimensionError("w and f must live on the context grid")
    return StaggeredVelocity(ctx.grid, ctx.forward(w.values, f.values))


def step_oseen_adjoint(q: StaggeredVelocity, source: ForceField, ctx: OseenContext) -> StaggeredVelocity:
    """One backward step: the transpose of step_oseen plus dt * source."""
    if q.grid != ctx.grid or source.grid != ctx.grid:
        raise DimensionError("q and source must live on the context grid")
    return StaggeredVelocity(ctx.grid, ctx.backward(q.values, source.values))


@dataclass
class DecayEstimate:
    sigma: float
    fit_residual: float
    samples: int
    rates: List[float]
    decaying: bool
    window_points: int = 0
    series: Optional[pd.DataFrame] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma": self.sigma,
            "fit_residual": self.fit_residual,
            "samples": self.samples,
            "rates": list(self.rates),
            "decaying": self.decaying,
            "window_points": self.window_points,
        }


def decay_window(times: np.ndarray, values: np.ndarray, horizon: float) -> np.ndarray:
    """
    Fit window of a decaying series: the second half of [0, t_cut], where
    t_cut is the horizon or the last time before the series first drops to
    the floor, whichever comes first.
    """
    below = np.flatnonzero(values <= VALUE_FLOOR)
    cut = horizon
    if below.size:
        cut = float(times[below[0] - 1]) if below[0] > 0 else 0.0
    return (times >= 0.5 * cut) & (times <= cut) & (values > VALUE_FLOOR)


def estimate_decay_rate(
    ctx: OseenContext,
    horizon: float,
    n_samples: int = 4,
    seed: int = 0,
    smoothing: float = 0.0,
    min_points: int = 10,
) -> DecayEstimate:
    """
    Slowest decay rate of the linearized dynamics.

    Each sample evolves a seeded random divergence-free field with f = 0 and
    fits -slope of log |w(t)|_V on the second half of [0, horizon], cut short
    where |w|_V reaches the floor; the minimum over samples is returned. A
    non-positive rate is flagged, not raised. A window of fewer than
    min_points nodes raises ValueError.
    """
    params = ctx.params.with_horizon(horizon)
    times = params.times
    tail = times >= 0.5 * horizon
    if tail.sum() < min_points:
        raise ValueError(f"horizon: {horizon} gives fewer than {min_points} points in the fit window")

    rng = np.random.default_rng(seed)
    grid = ctx.grid
    rates, residuals, window_points = [], [], []
    series = None
    for sample in range(n_samples):
        w = random_divergence_free(grid, rng, smoothing=smoothing).values
        l2 = np.empty(times.size)
        h1 = np.empty(times.size)
        for k in range(times.size):
            field_k = StaggeredVelocity(grid, w)
            l2[k], h1[k] = norm_l2(field_k), norm_h1_semi(field_k)
            if k + 1 < times.size:
                w = ctx.forward(w)
        mask = decay_window(times, h1, horizon)
        if mask.sum() < min_points:
            raise ValueError(
                f"dt: sample {sample} falls below {VALUE_FLOOR:g} after {int((h1 > VALUE_FLOOR).sum())} "
                f"points, leaving {int(mask.sum())} < {min_points} points to fit; reduce dt"
            )
        fit = fit_log_linear(times[mask], h1[mask])
        rates.append(-fit.slope)
        residuals.append(fit.max_residual)
        window_points.append(int(mask.sum()))
        if series is None:
            series = pd.DataFrame({"t": times, "l2": l2, "h1": h1})
        logger.debug("decay sample %d: rate %.6f over %d points", sample, -fit.slope, mask.sum())

    worst = int(np.argmin(rates))
    sigma = float(rates[worst])
    if sigma <= 0:
        logger.warning("linearized dynamics do not decay (sigma=%.3e): unstable base flow", sigma)
    return DecayEstimate(
        sigma=sigma,
        fit_residual=float(residuals[worst]),
        samples=n_samples,
        rates=[float(r) for r in rates],
        decaying=sigma > 0,
        window_points=min(window_points),
        series=series,
    )


@dataclass
class CoercivityConstants:
    gamma: float
    xi: float
    samples: int


def coercivity_constants(ctx: OseenContext, n_samples: int = 20, seed: int = 0) -> CoercivityConstants:
    """
    Measured constants of <A z, z> + gamma |z|^2 >= xi |z|_V^2 on random fields.

    For divergence-free z, <A z, z> = mu |z|_V^2 + <E(ybar) z, z>. xi is fixed
    to mu / 2 and gamma is the smallest value that satisfies every sample.
    """
    grid = ctx.grid
    xi = 0.5 * ctx.params.mu
    e = ctx.jacobian
    rng = np.random.default_rng(seed)
    gamma = 0.0
    for _ in range(n_samples):
        z = random_divergence_free(grid, rng).values
        v_norm2 = -grid.weight * float(z @ (grid_operators(grid).laplacian @ z))
        l2_norm2 = grid.weight * float(z @ z)
        form = ctx.params.mu * v_norm2
        if e is not None:
            form += grid.weight * float(z @ (e @ z))
        gamma = max(gamma, (xi * v_norm2 - form) / l2_norm2)
    return CoercivityConstants(gamma=gamma, xi=xi, samples=n_samples)
