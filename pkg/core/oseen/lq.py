"""
Linear-quadratic problem around a steady optimal pair (ybar, qbar).

    I(v) = 1/2 sum_k c_k |z_k|^2 - sum_k c_k <C(z_k) z_k, qbar>
           + kappa/2 sum_k c_k |v_k|^2 + <phi0, z_N>

    z_{k+1} = S (B z_k + dt (v_k + v_{k+1}) / 2),   z_0 given

Since <C(z) z, qbar> = -<E(qbar) z, z>, the curvature term is the fixed
quadratic form W = E(qbar) + E(qbar)^T and the backward source reads
c_k (z_k + W z_k). The optimality system v = -phi / kappa is solved by
forward-backward sweeps; minimize_lq_cg solves the same problem by
conjugate gradients as an independent path.
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse.linalg as spla

from core.control.problem import ControlSignal, trapezoid_weights
from core.control.unsteady import EvolutionProblem
from core.errors import DimensionError, NonConvergence
from core.flow.params import Trajectory
from core.mesh.grid import StaggeredVelocity
from core.mesh.operators import convection_jacobian_matrix
from .service import OseenContext

logger = logging.getLogger(__name__)


class LQProblem:
    """The quadratic functional I on a horizon T."""

    def __init__(
        self,
        ctx: OseenContext,
        horizon: float,
        z0: StaggeredVelocity,
        phi0: Optional[StaggeredVelocity] = None,
        kappa: float = 1.0,
    ):
        if not kappa > 0:
            raise ValueError(f"kappa: must be > 0, got {kappa!r}")
        if z0.grid != ctx.grid or (phi0 is not None and phi0.grid != ctx.grid):
            raise DimensionError("z0 and phi0 must live on the context grid")
        self.ctx = ctx
        self.params = ctx.params.with_horizon(horizon)
        self.grid = ctx.grid
        self.kappa = kappa
        self.z0 = z0.values
        self.phi0 = phi0.values if phi0 is not None else None
        self.weights = trapezoid_weights(self.params.n_steps, self.params.dt)
        if ctx.qbar is not None and ctx.qbar.max_abs() > 0 and self.params.convection:
            e = convection_jacobian_matrix(self.grid, ctx.qbar.values)
            self.curvature = (e + e.T).tocsr()
        else:
            self.curvature = None

    def zero(self) -> ControlSignal:
        return ControlSignal.zeros(self.params)

    def forward(self, v: ControlSignal, homogeneous: bool = False) -> np.ndarray:
        z = np.empty((self.params.n_steps + 1, self.grid.dim))
        z[0] = 0.0 if homogeneous else self.z0
        for k in range(self.params.n_steps):
            z[k + 1] = self.ctx.forward(z[k], v.forcing(k))
        return z

    def backward(self, z: np.ndarray, homogeneous: bool = False) -> np.ndarray:
        """Node adjoint phi of a state sequence z."""
        n_steps = self.params.n_steps
        r_all = np.zeros_like(z)

        def source(k: int) -> np.ndarray:
            s = z[k] if self.curvature is None else z[k] + self.curvature @ z[k]
            return self.weights[k] * s

        lam = source(n_steps)
        if self.phi0 is not None and not homogeneous:
            lam = lam + self.phi0
        for k in range(n_steps - 1, -1, -1):
            r = self.ctx.step.solve_transpose(lam)
            r_all[k + 1] = r
            if k == 0:
                break
            jac = self.ctx.jacobian
            lam = source(k) + (r if jac is None else r - self.params.dt * (jac.T @ r))
        return EvolutionProblem.node_adjoint(r_all)

    def cost(self, v: ControlSignal) -> float:
        z = self.forward(v)
        h2 = self.grid.weight
        per_node = np.einsum("ij,ij->i", z, z)
        if self.curvature is not None:
            per_node = per_node + np.einsum("ij,ij->i", z, (self.curvature @ z.T).T)
        total = 0.5 * h2 * float(self.weights @ per_node) + 0.5 * self.kappa * v.inner(v)
        if self.phi0 is not None:
            total += h2 * float(self.phi0 @ z[-1])
        return total

    def gradient(self, v: ControlSignal, homogeneous: bool = False) -> ControlSignal:
        """kappa v + phi in the trapezoid product."""
        phi = self.backward(self.forward(v, homogeneous), homogeneous)
        return v.like(self.kappa * v.values + phi)


def lq_cost(v: ControlSignal, z0, phi0, ctx: OseenContext, T: float, kappa: float = 1.0) -> float:
    return LQProblem(ctx, T, z0, phi0, kappa).cost(v)


def lq_gradient(v: ControlSignal, z0, phi0, ctx: OseenContext, T: float, kappa: float = 1.0) -> ControlSignal:
    return LQProblem(ctx, T, z0, phi0, kappa).gradient(v)


def solve_lq_optimality(
    z0: StaggeredVelocity,
    phi0: Optional[StaggeredVelocity],
    ctx: OseenContext,
    T: float,
    kappa: float = 1.0,
    tol: float = 1e-9,
    max_sweeps: int = 500,
) -> Tuple[Trajectory, Trajectory]:
    """
    Forward-backward sweeps on z' = -A z - phi / kappa, phi backward from phi(T) = phi0.

    Sweeps replace phi fully; when the sweep residual grows they continue with
    relaxation 0.5. Raises NonConvergence with the residual history at the cap.
    """
    problem = LQProblem(ctx, T, z0, phi0, kappa)
    phi = np.zeros((problem.params.n_steps + 1, problem.grid.dim))
    history: List[float] = []
    relaxation = 1.0
    for sweep in range(max_sweeps):
        v = problem.zero().like(-phi / kappa)
        z = problem.forward(v)
        phi_new = problem.backward(z)
        scale = max(1.0, float(np.max(np.abs(phi_new))))
        residual = float(np.max(np.abs(phi_new - phi))) / scale
        history.append(residual)
        logger.debug("LQ sweep %d: residual %.3e", sweep, residual)
        if residual <= tol:
            return (
                Trajectory.from_array(z, problem.params),
                Trajectory.from_array(phi_new, problem.params),
            )
        if relaxation == 1.0 and len(history) > 1 and residual > history[-2]:
            logger.info("LQ sweeps not contracting, switching to relaxation 0.5")
            relaxation = 0.5
        phi = phi + relaxation * (phi_new - phi)
    raise NonConvergence(f"LQ sweeps stopped at residual {history[-1]:.3e} after {max_sweeps} sweeps", history)


def riccati_action(
    z0: StaggeredVelocity, ctx: OseenContext, T: float, kappa: float = 1.0, tol: float = 1e-9
) -> StaggeredVelocity:
    """phi(0) of the LQ optimality system with phi0 = 0; linear in z0."""
    _, phi = solve_lq_optimality(z0, None, ctx, T, kappa, tol)
    return phi[0]


def minimize_lq_cg(
    z0: StaggeredVelocity,
    phi0: Optional[StaggeredVelocity],
    ctx: OseenContext,
    T: float,
    kappa: float = 1.0,
    rtol: float = 1e-12,
    maxiter: Optional[int] = None,
) -> Tuple[ControlSignal, Trajectory, Dict[str, float]]:
    """Minimize I by conjugate gradients on its weighted normal equations."""
    problem = LQProblem(ctx, T, z0, phi0, kappa)
    zero = problem.zero()
    shape = zero.values.shape
    metric = (problem.weights * problem.grid.weight)[:, None]

    def matvec(x: np.ndarray) -> np.ndarray:
        hv = problem.gradient(zero.like(x.reshape(shape)), homogeneous=True)
        return (metric * hv.values).ravel()

    operator = spla.LinearOperator((zero.values.size, zero.values.size), matvec=matvec, dtype=float)
    rhs = -(metric * problem.gradient(zero).values).ravel()
    solution, info = spla.cg(operator, rhs, rtol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        logger.warning("LQ conjugate gradients ended with info=%d", info)
    v = zero.like(solution.reshape(shape))
    z = Trajectory.from_array(problem.forward(v), problem.params)
    return v, z, {"info": float(info), "cost": problem.cost(v)}
