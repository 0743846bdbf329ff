"""
Evolutionary tracking problems.

The discrete cost of a control u on the time nodes t_0, ..., t_N is

    J(u) = 1/2 sum_k c_k |y_k - x^d|^2 + k/2 sum_k c_k |u_k|^2 + <q0, y_N>

with trapezoid weights c_k and y_{k+1} = S_k (y_k + dt f_k), where S_k is the
implicit step advected by y_k and f_k = (u_k + u_{k+1}) / 2. Gradients are the
exact transposes of this recursion; Hessian-vector products differentiate the
adjoint recursion once more along the tangent states.

A time-independent control (kind "steady") forces every step with the same
field; its cost is the same functional with the penalty k T / 2 |u|^2.

Long horizons are checkpointed: states are kept every ceil(sqrt(N)) steps and
recomputed window by window during the backward pass.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import DimensionError
from core.flow.params import Trajectory
from core.flow.stepper import ImplicitStep, step_operator
from core.mesh.operators import apply_convection, convection_jacobian_matrix
from .problem import ControlSignal, CostBreakdown, ProblemSpec, trapezoid_weights

logger = logging.getLogger(__name__)

# Horizons with more steps than this keep only sqrt(N) checkpoints
CHECKPOINT_THRESHOLD = 400


def checkpoint_stride(n_steps: int, threshold: int = CHECKPOINT_THRESHOLD) -> int:
    if n_steps <= threshold:
        return 1
    return int(math.ceil(math.sqrt(n_steps)))


@dataclass
class _StepRecord:
    y: np.ndarray
    y_star: np.ndarray
    op: ImplicitStep
    dy: Optional[np.ndarray] = None
    dy_star: Optional[np.ndarray] = None


@dataclass
class _ForwardPass:
    checkpoints: Dict[int, Tuple[np.ndarray, Optional[np.ndarray]]]
    y_final: np.ndarray
    dy_final: Optional[np.ndarray]
    breakdown: CostBreakdown
    residual: float = 0.0


class EvolutionProblem:
    """Tracking problem over [0, T] with a time-varying or time-independent control."""

    def __init__(
        self,
        spec: ProblemSpec,
        time_independent: bool = False,
        checkpoint_threshold: int = CHECKPOINT_THRESHOLD,
    ):
        if time_independent and spec.q0 is not None:
            raise ValueError("q0: the time-independent problem has no terminal term")
        self.spec = spec
        self.params = spec.params
        self.grid = spec.grid
        self.kind = "steady" if time_independent else "time_varying"
        self.variant = "time_independent" if time_independent else "unsteady"
        self.checkpoint_threshold = checkpoint_threshold
        self.weights = trapezoid_weights(self.params.n_steps, self.params.dt)
        self._target = spec.target.values
        self._q0 = spec.q0.values if spec.q0 is not None else None

    # ===== Control space =====

    def zero(self) -> ControlSignal:
        return ControlSignal.zeros(self.params, kind=self.kind)

    def penalty_weight(self) -> float:
        """Coefficient c with penalty c/2 |u|^2 in the control product."""
        return self.spec.k if self.kind == "time_varying" else self.spec.k * self.params.t_final

    def _check_control(self, u: ControlSignal) -> None:
        if u.kind != self.kind:
            raise DimensionError(f"{self.variant} problem expects a {self.kind} control, got {u.kind}")
        u.check_compatible(self.params)

    # ===== Sweeps =====

    def _step(self, y: np.ndarray, u: ControlSignal, k: int) -> Tuple[np.ndarray, np.ndarray, ImplicitStep]:
        op = step_operator(self.params, y)
        y_next, y_star, _ = op.solve(y + self.params.dt * u.forcing(k))
        return y_next, y_star, op

    def _tangent(
        self, op: ImplicitStep, y_star: np.ndarray, dy: np.ndarray, v: ControlSignal, k: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        dt = self.params.dt
        rhs = dy + dt * v.forcing(k)
        if self.params.convection:
            rhs = rhs - dt * apply_convection(self.grid, dy, y_star)
        dy_next, dy_star, _ = op.solve(rhs)
        return dy_next, dy_star

    def _tracking_term(self, y: np.ndarray, k: int) -> float:
        diff = y - self._target
        return 0.5 * self.weights[k] * self.grid.weight * float(diff @ diff)

    def _forward(self, u: ControlSignal, v: Optional[ControlSignal] = None, certify: bool = False) -> _ForwardPass:
        n_steps = self.params.n_steps
        stride = checkpoint_stride(n_steps, self.checkpoint_threshold)
        y = self.spec.initial_state().values.copy()
        dy = np.zeros_like(y) if v is not None else None
        checkpoints = {0: (y, dy)}
        tracking = self._tracking_term(y, 0)
        worst = 0.0
        for k in range(n_steps):
            y_next, y_star, op = self._step(y, u, k)
            if certify:
                worst = max(worst, op.residual(y + self.params.dt * u.forcing(k), y_next, y_star))
            if v is not None:
                dy, _ = self._tangent(op, y_star, dy, v, k)
            y = y_next
            tracking += self._tracking_term(y, k + 1)
            if (k + 1) % stride == 0 and k + 1 < n_steps:
                checkpoints[k + 1] = (y, dy)

        penalty = 0.5 * self.penalty_weight() * u.inner(u)
        terminal = self.grid.weight * float(self._q0 @ y) if self._q0 is not None else 0.0
        return _ForwardPass(checkpoints, y, dy, CostBreakdown(tracking, penalty, terminal), worst)

    def _replay(
        self, start: int, stop: int, y: np.ndarray, dy: Optional[np.ndarray],
        u: ControlSignal, v: Optional[ControlSignal],
    ) -> List[_StepRecord]:
        records = []
        for k in range(start, stop):
            y_next, y_star, op = self._step(y, u, k)
            record = _StepRecord(y=y, y_star=y_star, op=op)
            if v is not None:
                record.dy = dy
                dy, record.dy_star = self._tangent(op, y_star, dy, v, k)
            records.append(record)
            y = y_next
        return records

    def _windows(self, checkpoints: Dict[int, tuple]) -> List[Tuple[int, int]]:
        starts = sorted(checkpoints)
        stops = starts[1:] + [self.params.n_steps]
        return list(zip(starts, stops))

    def _backward(
        self, u: ControlSignal, fwd: _ForwardPass, v: Optional[ControlSignal] = None, certify: bool = False,
    ) -> Tuple[np.ndarray, Optional[np.ndarray], float]:
        """Adjoint sweep; returns r_1..r_N (row k holds r_k, row 0 unused), their tangents and a residual."""
        n_steps, dt = self.params.n_steps, self.params.dt
        dim = self.grid.dim
        r_all = np.zeros((n_steps + 1, dim))
        dr_all = np.zeros((n_steps + 1, dim)) if v is not None else None

        lam = self.weights[-1] * (fwd.y_final - self._target)
        if self._q0 is not None:
            lam = lam + self._q0
        dlam = self.weights[-1] * fwd.dy_final if v is not None else None
        worst = 0.0

        for start, stop in reversed(self._windows(fwd.checkpoints)):
            y_start, dy_start = fwd.checkpoints[start]
            records = self._replay(start, stop, y_start, dy_start, u, v)
            for k in range(stop - 1, start - 1, -1):
                rec = records[k - start]
                r = rec.op.solve_transpose(lam)
                if certify:
                    worst = max(worst, rec.op.transpose_residual(lam, r))
                r_all[k + 1] = r
                e_star = convection_jacobian_matrix(self.grid, rec.y_star) if self.params.convection else None

                if v is not None:
                    extra = dt * apply_convection(self.grid, rec.dy, r) if self.params.convection else None
                    dr = rec.op.solve_transpose(dlam, extra)
                    dr_all[k + 1] = dr

                if k == 0:
                    break
                source = self.weights[k] * (rec.y - self._target)
                lam_next = source + r
                if e_star is not None:
                    lam_next = lam_next - dt * (e_star.T @ r)
                if v is not None:
                    dlam_next = self.weights[k] * rec.dy + dr
                    if e_star is not None:
                        e_dstar = convection_jacobian_matrix(self.grid, rec.dy_star)
                        dlam_next = dlam_next - dt * (e_dstar.T @ r) - dt * (e_star.T @ dr)
                    dlam = dlam_next
                lam = lam_next
        return r_all, dr_all, worst

    @staticmethod
    def node_adjoint(r_all: np.ndarray) -> np.ndarray:
        """q_0 = r_1, q_N = r_N and q_k = (r_k + r_{k+1}) / 2 in between."""
        q = np.empty_like(r_all)
        q[0] = r_all[1]
        q[-1] = r_all[-1]
        q[1:-1] = 0.5 * (r_all[1:-1] + r_all[2:])
        return q

    def _assemble(self, u: ControlSignal, q_nodes: np.ndarray, penalty_direction: ControlSignal) -> ControlSignal:
        """Riesz representative k u + q in the control product."""
        k = self.spec.k
        if self.kind == "time_varying":
            return penalty_direction.like(k * penalty_direction.values + q_nodes)
        total = self.weights @ q_nodes
        return penalty_direction.like((self.penalty_weight() * penalty_direction.values[0] + total)[None, :])

    # ===== Public operations =====

    def cost(self, u: ControlSignal) -> CostBreakdown:
        self._check_control(u)
        return self._forward(u).breakdown

    def gradient(self, u: ControlSignal) -> Tuple[CostBreakdown, ControlSignal, np.ndarray]:
        """Returns (cost, gradient, node adjoint q as an (N+1, dim) array)."""
        self._check_control(u)
        fwd = self._forward(u)
        r_all, _, _ = self._backward(u, fwd)
        q_nodes = self.node_adjoint(r_all)
        return fwd.breakdown, self._assemble(u, q_nodes, u), q_nodes

    def hessian_vec(self, u: ControlSignal, v: ControlSignal) -> ControlSignal:
        self._check_control(u)
        self._check_control(v)
        fwd = self._forward(u, v)
        _, dr_all, _ = self._backward(u, fwd, v)
        return self._assemble(v, self.node_adjoint(dr_all), v)

    def certify(self, u: ControlSignal) -> Dict[str, float]:
        """Largest relative residuals of the forward and backward step equations."""
        self._check_control(u)
        fwd = self._forward(u, certify=True)
        _, _, backward = self._backward(u, fwd, certify=True)
        return {"forward_residual": fwd.residual, "backward_residual": backward}

    def trajectory(self, u: ControlSignal) -> Trajectory:
        self._check_control(u)
        values = np.empty((self.params.n_steps + 1, self.grid.dim))
        values[0] = self.spec.initial_state().values
        for k in range(self.params.n_steps):
            values[k + 1], _, _ = self._step(values[k], u, k)
        return Trajectory.from_array(values, self.params)

    def adjoint_trajectory(self, q_nodes: np.ndarray) -> Trajectory:
        return Trajectory.from_array(q_nodes, self.params)


# ===== Function-style entry points =====

def cost_unsteady(u: ControlSignal, spec: ProblemSpec) -> CostBreakdown:
    return EvolutionProblem(spec).cost(u)


def gradient_unsteady(u: ControlSignal, spec: ProblemSpec) -> ControlSignal:
    return EvolutionProblem(spec).gradient(u)[1]


def hessian_vec_unsteady(u: ControlSignal, v: ControlSignal, spec: ProblemSpec) -> ControlSignal:
    return EvolutionProblem(spec).hessian_vec(u, v)
