"""
Flow parameters and the value types produced by the solvers.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from core.errors import DimensionError
from core.mesh.grid import CellScalar, Grid, StaggeredVelocity
from core.mesh.operators import max_divergence, norm_h1_semi, norm_l2

PRESSURE_SCHEMES = ("projection", "coupled")


@dataclass(frozen=True)
class FlowParams:
    """Viscosity, time step, horizon and grid of one run.

    pressure_scheme:
        "projection" - Chorin step, implicit momentum solve then Leray projection
        "coupled"    - implicit momentum and incompressibility solved together;
                       its fixed point is the discrete steady solution
    """

    mu: float
    dt: float
    t_final: float
    n: int
    pressure_scheme: str = "projection"
    convection: bool = True
    cfl: float = 0.5

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu: must be > 0, got {self.mu!r}")
        if not self.dt > 0:
            raise ValueError(f"dt: must be > 0, got {self.dt!r}")
        if not self.t_final > 0:
            raise ValueError(f"t_final: must be > 0, got {self.t_final!r}")
        ratio = self.t_final / self.dt
        if abs(ratio - round(ratio)) > 1e-12 * max(1.0, ratio):
            raise ValueError(f"t_final: {self.t_final} is not an integer multiple of dt={self.dt}")
        if self.pressure_scheme not in PRESSURE_SCHEMES:
            raise ValueError(f"pressure_scheme: expected one of {PRESSURE_SCHEMES}, got {self.pressure_scheme!r}")
        if not self.cfl > 0:
            raise ValueError(f"cfl: must be > 0, got {self.cfl!r}")
        Grid(self.n)

    @property
    def grid(self) -> Grid:
        return Grid(self.n)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def with_horizon(self, t_final: float) -> "FlowParams":
        return replace(self, t_final=float(t_final))

    def cfl_number(self, max_velocity: float) -> float:
        return max_velocity * self.dt / self.grid.h

    def max_stable_dt(self, max_velocity: float) -> float:
        """Largest dt within the advective CFL bound c_cfl * h / max-velocity."""
        if max_velocity <= 0:
            return float("inf")
        return self.cfl * self.grid.h / max_velocity


@dataclass
class Trajectory:
    """Velocity snapshots at the uniform time nodes 0, dt, ..., T."""

    snapshots: List[StaggeredVelocity]
    params: FlowParams

    def __post_init__(self):
        expected = self.params.n_steps + 1
        if len(self.snapshots) != expected:
            raise DimensionError(f"trajectory has {len(self.snapshots)} snapshots, expected {expected}")

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, k: int) -> StaggeredVelocity:
        return self.snapshots[k]

    @property
    def grid(self) -> Grid:
        return self.params.grid

    @property
    def times(self) -> np.ndarray:
        return self.params.times

    @property
    def horizon(self) -> float:
        return self.params.t_final

    @classmethod
    def from_array(cls, values: np.ndarray, params: FlowParams) -> "Trajectory":
        grid = params.grid
        return cls([StaggeredVelocity(grid, row.copy()) for row in values], params)

    def as_array(self) -> np.ndarray:
        """(N+1, dim) array of the interior-face vectors."""
        return np.stack([s.values for s in self.snapshots])

    def final(self) -> StaggeredVelocity:
        return self.snapshots[-1]

    def norms_l2(self) -> np.ndarray:
        return np.array([norm_l2(s) for s in self.snapshots])

    def norms_h1(self) -> np.ndarray:
        return np.array([norm_h1_semi(s) for s in self.snapshots])

    def distance_to(self, reference: StaggeredVelocity) -> np.ndarray:
        """L2 distance of every snapshot to a fixed field."""
        return np.array([norm_l2(s - reference) for s in self.snapshots])

    def max_divergence(self) -> float:
        return max(max_divergence(s) for s in self.snapshots)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "t": self.times,
            "l2": self.norms_l2(),
            "h1": self.norms_h1(),
        })


@dataclass
class SteadyState:
    """Converged steady velocity and mean-free pressure."""

    y: StaggeredVelocity
    p: CellScalar
    residual: float
    params: FlowParams
    iterations: int = 0
    history: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        return {
            "residual": self.residual,
            "iterations": self.iterations,
            "l2": norm_l2(self.y),
            "h1": norm_h1_semi(self.y),
            "max_divergence": max_divergence(self.y),
        }
