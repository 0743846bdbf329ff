"""
Turnpike module: distance series, exponential edge fits, horizon sweeps and
the convergence of time-averaged optimal costs.
"""
