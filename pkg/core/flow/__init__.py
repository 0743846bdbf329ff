"""
Flow module for the unsteady and steady Navier-Stokes problems.

Provides:
- FlowParams, Trajectory, SteadyState
- step_ns, solve_unsteady, energy_balance_residual
- solve_steady and the steady energy bound
- stabilization_experiment (decay toward a steady state)
- manufactured solutions for convergence studies
"""
