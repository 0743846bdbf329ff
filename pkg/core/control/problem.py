"""
Control signals, problem data and optimization results.

A ControlSignal is either time varying (one force field per time node) or
steady (one force field). Time-varying signals use the trapezoid-weighted
product sum_k c_k <u_k, v_k> with c_0 = c_N = dt/2 and c_k = dt otherwise;
steady signals use the plain h^2-weighted product.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core.errors import DimensionError
from core.flow.params import FlowParams, SteadyState, Trajectory
from core.mesh.grid import ForceField, Grid, StaggeredVelocity

CONTROL_KINDS = ("time_varying", "steady")
VARIANTS = ("unsteady", "steady", "time_independent")


def trapezoid_weights(n_steps: int, dt: float) -> np.ndarray:
    weights = np.full(n_steps + 1, dt)
    weights[0] = weights[-1] = 0.5 * dt
    return weights


class ControlSignal:
    """Distributed body force, time varying or steady."""

    def __init__(self, kind: str, grid: Grid, values: np.ndarray, dt: Optional[float] = None):
        if kind not in CONTROL_KINDS:
            raise ValueError(f"kind: expected one of {CONTROL_KINDS}, got {kind!r}")
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] != grid.dim:
            raise DimensionError(f"control rows have length {values.shape[1]}, expected {grid.dim}")
        if kind == "steady" and values.shape[0] != 1:
            raise DimensionError("a steady control holds exactly one field")
        if kind == "time_varying":
            if values.shape[0] < 2:
                raise DimensionError("a time-varying control needs at least two nodes")
            if dt is None or not dt > 0:
                raise ValueError("dt: a time-varying control needs a positive step")
        self.kind = kind
        self.grid = grid
        self.values = values
        self.dt = dt

    # ===== Constructors =====

    @classmethod
    def zeros(cls, params: FlowParams, kind: str = "time_varying") -> "ControlSignal":
        rows = params.n_steps + 1 if kind == "time_varying" else 1
        return cls(kind, params.grid, np.zeros((rows, params.grid.dim)), params.dt)

    @classmethod
    def steady(cls, force: ForceField) -> "ControlSignal":
        return cls("steady", force.grid, force.values[None, :].copy())

    @classmethod
    def time_varying(cls, fields: Sequence[ForceField], params: FlowParams) -> "ControlSignal":
        signal = cls("time_varying", params.grid, np.stack([f.values for f in fields]), params.dt)
        signal.check_compatible(params)
        return signal

    @classmethod
    def constant(cls, force: ForceField, params: FlowParams) -> "ControlSignal":
        """Time-varying signal repeating one field at every node."""
        values = np.tile(force.values, (params.n_steps + 1, 1))
        return cls("time_varying", force.grid, values, params.dt)

    def like(self, values: np.ndarray) -> "ControlSignal":
        return ControlSignal(self.kind, self.grid, values, self.dt)

    # ===== Access =====

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def fields(self) -> List[ForceField]:
        return [ForceField(self.grid, row.copy()) for row in self.values]

    @property
    def field(self) -> ForceField:
        if self.kind != "steady":
            raise ValueError("field: only defined for steady controls")
        return ForceField(self.grid, self.values[0].copy())

    def node(self, k: int) -> ForceField:
        return ForceField(self.grid, self.values[k].copy())

    def forcing(self, k: int) -> np.ndarray:
        """Force acting on the step k -> k+1 (node average for time-varying signals)."""
        if self.kind == "steady":
            return self.values[0]
        return 0.5 * (self.values[k] + self.values[k + 1])

    def check_compatible(self, params: FlowParams) -> None:
        if self.grid != params.grid:
            raise DimensionError(f"control grid n={self.grid.n} does not match n={params.n}")
        if self.kind == "time_varying":
            if self.n_nodes != params.n_steps + 1:
                raise DimensionError(
                    f"control has {self.n_nodes} nodes, horizon needs {params.n_steps + 1}"
                )
            if abs(self.dt - params.dt) > 1e-14 * params.dt:
                raise DimensionError(f"control dt={self.dt} does not match dt={params.dt}")

    # ===== Geometry =====

    def weights(self) -> np.ndarray:
        if self.kind == "steady":
            return np.ones(1)
        return trapezoid_weights(self.n_nodes - 1, self.dt)

    def inner(self, other: "ControlSignal") -> float:
        self._check_same(other)
        per_node = np.einsum("ij,ij->i", self.values, other.values)
        return self.grid.weight * float(self.weights() @ per_node)

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def node_norms(self) -> np.ndarray:
        return np.sqrt(self.grid.weight * np.einsum("ij,ij->i", self.values, self.values))

    def _check_same(self, other: "ControlSignal") -> None:
        if other.kind != self.kind or other.values.shape != self.values.shape or other.grid != self.grid:
            raise DimensionError("controls differ in kind, grid or number of nodes")

    # ===== Arithmetic =====

    def __add__(self, other: "ControlSignal") -> "ControlSignal":
        self._check_same(other)
        return self.like(self.values + other.values)

    def __sub__(self, other: "ControlSignal") -> "ControlSignal":
        self._check_same(other)
        return self.like(self.values - other.values)

    def __mul__(self, scalar: float) -> "ControlSignal":
        return self.like(float(scalar) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "ControlSignal":
        return self.like(-self.values)

    def __repr__(self) -> str:
        return f"ControlSignal(kind={self.kind}, n={self.grid.n}, nodes={self.n_nodes})"


@dataclass
class CostBreakdown:
    tracking: float
    penalty: float
    terminal: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.tracking + self.penalty + self.terminal

    def to_dict(self) -> Dict[str, float]:
        return {"tracking": self.tracking, "penalty": self.penalty, "terminal": self.terminal, "total": self.total}


@dataclass(frozen=True)
class ProblemSpec:
    """Data of a tracking problem.

    target:            x^d (also the z of the time-independent problem)
    q0:                terminal weight of <q0, y(T)>, None for no terminal term
    k:                 penalty weight of the evolutionary problems
    alpha:             penalty weight of the steady problem
    admissible_radius: radius of the L2 ball U_ad, None for no constraint
    """

    target: ForceField
    params: FlowParams
    y0: Optional[StaggeredVelocity] = None
    q0: Optional[StaggeredVelocity] = None
    k: float = 1.0
    alpha: float = 1.0
    admissible_radius: Optional[float] = None

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k: must be > 0, got {self.k!r}")
        if not self.alpha > 0:
            raise ValueError(f"alpha: must be > 0, got {self.alpha!r}")
        if self.admissible_radius is not None and not self.admissible_radius > 0:
            raise ValueError(f"admissible_radius: must be > 0 when set, got {self.admissible_radius!r}")
        for name in ("target", "y0", "q0"):
            value = getattr(self, name)
            if value is not None and value.grid != self.params.grid:
                raise DimensionError(f"{name}: grid n={value.grid.n} does not match n={self.params.n}")

    @property
    def grid(self) -> Grid:
        return self.params.grid

    def initial_state(self) -> StaggeredVelocity:
        return self.y0 if self.y0 is not None else StaggeredVelocity.zeros(self.grid)

    def with_horizon(self, t_final: float) -> "ProblemSpec":
        return replace(self, params=self.params.with_horizon(t_final))


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 200
    tol: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-14
    memory: int = 5

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError(f"max_iter: must be >= 0, got {self.max_iter!r}")
        if not self.tol > 0:
            raise ValueError(f"tol: must be > 0, got {self.tol!r}")
        if not 0 < self.armijo < 1:
            raise ValueError(f"armijo: must lie in (0, 1), got {self.armijo!r}")
        if not 0 < self.backtrack < 1:
            raise ValueError(f"backtrack: must lie in (0, 1), got {self.backtrack!r}")
        if self.memory < 0:
            raise ValueError(f"memory: must be >= 0, got {self.memory!r}")


@dataclass
class OptimizationReport:
    variant: str
    control: ControlSignal
    state: Union[Trajectory, SteadyState]
    adjoint: Union[Trajectory, StaggeredVelocity, None]
    breakdown: CostBreakdown
    cost_history: List[float]
    grad_norm_history: List[float]
    step_history: List[float]
    tracking_history: List[float]
    penalty_history: List[float]
    first_order_residual: float
    iterations: int
    converged: bool
    status: str
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """Per-iteration log (iter, cost, tracking, penalty, grad_norm, step)."""
        return pd.DataFrame({
            "iter": np.arange(len(self.cost_history)),
            "cost": self.cost_history,
            "tracking": self.tracking_history,
            "penalty": self.penalty_history,
            "grad_norm": self.grad_norm_history,
            "step": self.step_history,
        })

    def summary(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "first_order_residual": self.first_order_residual,
            "cost": self.breakdown.to_dict(),
            "control_norm": self.control.norm(),
            "diagnostics": self.diagnostics,
        }
