"""
Log-linear regression helpers for exponential decay rates.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

# Values at or below this are treated as numerically zero
VALUE_FLOOR = 1e-14


@dataclass
class LogLinearFit:
    slope: float
    intercept: float
    max_residual: float
    n_points: int


def fit_log_linear(times: np.ndarray, values: np.ndarray) -> LogLinearFit:
    """Least-squares line through (t, log value); values must be positive."""
    times = np.asarray(times, dtype=float)
    logs = np.log(np.asarray(values, dtype=float))
    model = LinearRegression()
    model.fit(times.reshape(-1, 1), logs)
    residual = logs - model.predict(times.reshape(-1, 1))
    return LogLinearFit(
        slope=float(model.coef_[0]),
        intercept=float(model.intercept_),
        max_residual=float(np.max(np.abs(residual))) if residual.size else 0.0,
        n_points=int(times.size),
    )


@dataclass
class DecayFit:
    """Exponential decay rate fitted to e(t) on a window."""

    rate: float
    intercept: float
    fit_residual: float
    window: Tuple[float, float]
    n_points: int
    envelope_ok: bool
    monotone: bool
    skipped: bool = False
    ok: bool = True
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    series: Optional[pd.DataFrame] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("series")
        data["window"] = list(self.window)
        return data


def fit_exponential_decay(
    times: np.ndarray,
    values: np.ndarray,
    window: Tuple[float, float],
    envelope_factor: float = 0.9,
    monotone_tol: float = 1e-8,
    min_points: int = 10,
) -> DecayFit:
    """
    Fit log e(t) on [t_lo, t_hi] and check the decay envelope.

    The rate is minus the fitted slope. The envelope check asks for
    e(t) <= e(0) * exp(-envelope_factor * rate * t) at every window node;
    monotonicity is checked over the whole series.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    series = pd.DataFrame({"t": times, "e": values})
    monotone = bool(np.all(values[1:] <= values[:-1] * (1.0 + monotone_tol) + VALUE_FLOOR))

    mask = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12) & (values > VALUE_FLOOR)
    n_points = int(mask.sum())
    if n_points < min_points:
        return DecayFit(
            rate=float("nan"), intercept=float("nan"), fit_residual=float("nan"),
            window=window, n_points=n_points, envelope_ok=False, monotone=monotone,
            ok=False, diagnostics={"reason": f"only {n_points} usable points in the fit window"},
            series=series,
        )

    fit = fit_log_linear(times[mask], values[mask])
    rate = -fit.slope
    bound = values[0] * np.exp(-envelope_factor * rate * times[mask])
    envelope_ok = bool(np.all(values[mask] <= bound * (1.0 + 1e-9)))
    ok = rate > 0 and monotone
    diagnostics: Dict[str, Any] = {"envelope_factor": envelope_factor}
    if not ok:
        diagnostics["reason"] = "no decay" if rate <= 0 else "non-monotone series"
    return DecayFit(
        rate=rate,
        intercept=fit.intercept,
        fit_residual=fit.max_residual,
        window=window,
        n_points=n_points,
        envelope_ok=envelope_ok,
        monotone=monotone,
        ok=ok,
        diagnostics=diagnostics,
        series=series,
    )
