"""
Staggered (MAC) grid on the unit square and the fields that live on it.

Layout, with h = 1/n:
- u-velocity on vertical faces,   full array (n+1) x n, u[i, j] at (i h, (j+1/2) h)
- v-velocity on horizontal faces, full array n x (n+1), v[i, j] at ((i+1/2) h, j h)
- scalars at cell centers,        array n x n,          s[i, j] at ((i+1/2) h, (j+1/2) h)

Boundary faces carry the homogeneous Dirichlet value. Fields store only the
interior faces as one flat vector: the (n-1) x n interior u-block followed by
the n x (n-1) interior v-block, both row-major. All operators in
`core.mesh.operators` act on that vector.
"""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from core.errors import DimensionError


@dataclass(frozen=True)
class Grid:
    """Uniform MAC grid with n cells per side."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 8 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"n: must be a power of two >= 8, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_u(self) -> int:
        return (self.n - 1) * self.n

    @property
    def n_v(self) -> int:
        return self.n * (self.n - 1)

    @property
    def dim(self) -> int:
        """Number of interior velocity unknowns."""
        return self.n_u + self.n_v

    @property
    def weight(self) -> float:
        """Quadrature weight of one face or cell (h^2)."""
        return self.h * self.h

    def u_coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinates of all u-faces, arrays of shape (n+1, n)."""
        x = np.arange(self.n + 1) * self.h
        y = (np.arange(self.n) + 0.5) * self.h
        return np.meshgrid(x, y, indexing="ij")

    def v_coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinates of all v-faces, arrays of shape (n, n+1)."""
        x = (np.arange(self.n) + 0.5) * self.h
        y = np.arange(self.n + 1) * self.h
        return np.meshgrid(x, y, indexing="ij")

    def cell_coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinates of cell centers, arrays of shape (n, n)."""
        c = (np.arange(self.n) + 0.5) * self.h
        return np.meshgrid(c, c, indexing="ij")


class FaceField:
    """A vector field stored on the interior faces of a grid."""

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.dim,):
            raise DimensionError(
                f"expected a vector of length {grid.dim} for n={grid.n}, got shape {values.shape}"
            )
        self.grid = grid
        self.values = values

    # ===== Constructors =====

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(grid, np.zeros(grid.dim))

    @classmethod
    def from_components(cls, grid: Grid, u: np.ndarray, v: np.ndarray):
        """Build from full face arrays; boundary faces are dropped (set to zero)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        n = grid.n
        if u.shape != (n + 1, n) or v.shape != (n, n + 1):
            raise DimensionError(f"component shapes {u.shape}, {v.shape} do not match n={n}")
        return cls(grid, np.concatenate([u[1:n, :].ravel(), v[:, 1:n].ravel()]))

    @classmethod
    def sample(cls, grid: Grid, fu: Callable, fv: Callable):
        """Sample the components fu(x, y), fv(x, y) at face centers."""
        xu, yu = grid.u_coords()
        xv, yv = grid.v_coords()
        u = np.broadcast_to(np.asarray(fu(xu, yu), dtype=float), xu.shape)
        v = np.broadcast_to(np.asarray(fv(xv, yv), dtype=float), xv.shape)
        return cls.from_components(grid, u, v)

    # ===== Views =====

    @property
    def u(self) -> np.ndarray:
        n = self.grid.n
        full = np.zeros((n + 1, n))
        full[1:n, :] = self.values[: self.grid.n_u].reshape(n - 1, n)
        return full

    @property
    def v(self) -> np.ndarray:
        n = self.grid.n
        full = np.zeros((n, n + 1))
        full[:, 1:n] = self.values[self.grid.n_u:].reshape(n, n - 1)
        return full

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def copy(self):
        return type(self)(self.grid, self.values.copy())

    def check_grid(self, other: "FaceField") -> None:
        if other.grid != self.grid:
            raise DimensionError(f"grid mismatch: n={self.grid.n} vs n={other.grid.n}")

    # ===== Arithmetic =====

    def __add__(self, other: "FaceField"):
        self.check_grid(other)
        return type(self)(self.grid, self.values + other.values)

    def __sub__(self, other: "FaceField"):
        self.check_grid(other)
        return type(self)(self.grid, self.values - other.values)

    def __mul__(self, scalar: float):
        return type(self)(self.grid, float(scalar) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(self.grid, -self.values)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.grid.n}, max|.|={self.max_abs():.3e})"


class StaggeredVelocity(FaceField):
    """Velocity-valued unknown (state, adjoint, perturbation)."""

    def as_force(self) -> "ForceField":
        return ForceField(self.grid, self.values.copy())


class ForceField(FaceField):
    """Force per unit mass on the velocity faces (controls, sources, targets)."""

    def as_velocity(self) -> StaggeredVelocity:
        return StaggeredVelocity(self.grid, self.values.copy())


@dataclass
class CellScalar:
    """Cell-centered scalar; with mean_zero set the discrete mean is removed."""

    grid: Grid
    values: np.ndarray
    mean_zero: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n, self.grid.n):
            raise DimensionError(
                f"expected cell array of shape {(self.grid.n, self.grid.n)}, got {self.values.shape}"
            )
        if self.mean_zero:
            self.values = self.values - self.values.mean()

    @classmethod
    def zeros(cls, grid: Grid, mean_zero: bool = False) -> "CellScalar":
        return cls(grid, np.zeros((grid.n, grid.n)), mean_zero=mean_zero)

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.weight)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))
