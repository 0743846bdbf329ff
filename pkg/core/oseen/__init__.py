"""
Oseen module for the dynamics linearized around a steady state.

Provides:
- OseenContext, step_oseen, step_oseen_adjoint
- estimate_decay_rate and coercivity_constants
- the linear-quadratic optimality system: sweeps, Riccati action and a
  conjugate-gradient cross-check
"""
