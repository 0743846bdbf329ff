"""
Control module for the tracking problems.

Provides:
- ControlSignal, ProblemSpec, CostBreakdown, OptimizationReport
- cost, adjoint gradient and Hessian-vector products (unsteady, steady,
  time-independent controls)
- estimate_M, minimize, solve_optimality_system, sample_rayleigh
"""
