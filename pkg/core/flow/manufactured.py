"""
Manufactured Navier-Stokes solutions for convergence studies.

The velocity is the curl of the stream function

    psi = A g(t) sin^2(pi x) sin^2(pi y)

so it is divergence free and vanishes with its normal derivative on the walls.
The compensating force is derived symbolically and turned into numpy
callables with sympy.lambdify.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import sympy as sym

from core.mesh.grid import CellScalar, ForceField, Grid, StaggeredVelocity

TIME_PROFILES = ("steady", "decaying", "oscillating")


@dataclass(frozen=True)
class ManufacturedSolution:
    """Exact velocity, pressure and force as callables of (x, y, t)."""

    mu: float
    u: Callable
    v: Callable
    p: Callable
    fu: Callable
    fv: Callable

    def velocity(self, grid: Grid, t: float = 0.0) -> StaggeredVelocity:
        return StaggeredVelocity.sample(grid, lambda x, y: self.u(x, y, t), lambda x, y: self.v(x, y, t))

    def force(self, grid: Grid, t: float = 0.0) -> ForceField:
        return ForceField.sample(grid, lambda x, y: self.fu(x, y, t), lambda x, y: self.fv(x, y, t))

    def pressure(self, grid: Grid, t: float = 0.0) -> CellScalar:
        xc, yc = grid.cell_coords()
        values = np.broadcast_to(np.asarray(self.p(xc, yc, t), dtype=float), xc.shape)
        return CellScalar(grid, values, mean_zero=True)


def manufactured_solution(
    mu: float,
    amplitude: float = 0.5,
    time_profile: str = "steady",
    convection: bool = True,
) -> ManufacturedSolution:
    if time_profile not in TIME_PROFILES:
        raise ValueError(f"time_profile: expected one of {TIME_PROFILES}, got {time_profile!r}")
    x, y, t = sym.symbols("x y t", real=True)
    g = {
        "steady": sym.Integer(1),
        "decaying": sym.exp(-t),
        "oscillating": 1 + sym.sin(2 * sym.pi * t) / 2,
    }[time_profile]

    psi = amplitude * g * sym.sin(sym.pi * x) ** 2 * sym.sin(sym.pi * y) ** 2
    u = sym.diff(psi, y)
    v = -sym.diff(psi, x)
    p = amplitude * g * sym.cos(sym.pi * x) * sym.cos(sym.pi * y)

    def momentum(w):
        expr = sym.diff(w, t) - mu * (sym.diff(w, x, 2) + sym.diff(w, y, 2))
        if convection:
            expr += u * sym.diff(w, x) + v * sym.diff(w, y)
        return expr

    fu = sym.simplify(momentum(u) + sym.diff(p, x))
    fv = sym.simplify(momentum(v) + sym.diff(p, y))

    def to_numpy(expr):
        return sym.lambdify((x, y, t), expr, modules="numpy")

    return ManufacturedSolution(
        mu=mu, u=to_numpy(u), v=to_numpy(v), p=to_numpy(p), fu=to_numpy(fu), fv=to_numpy(fv)
    )
