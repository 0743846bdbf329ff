"""
Exception hierarchy shared by the solver, control and experiment layers.
"""

from typing import Any, Dict, List, Optional


class TurnpikeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TurnpikeError):
    """Two fields or signals live on different grids or time axes."""


class SolverFailure(TurnpikeError):
    """A linear solve did not reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class NonConvergence(TurnpikeError):
    """A nonlinear iteration or a forward-backward sweep hit its cap."""

    def __init__(self, message: str, history: Optional[List[float]] = None):
        super().__init__(message)
        self.history = list(history or [])


class RegimeGateFailure(TurnpikeError):
    """A checked hypothesis (smallness, stability, closeness) does not hold."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(TurnpikeError):
    """An experiment configuration is invalid."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


class ClaimFailure(TurnpikeError):
    """An experiment ran to completion but a claimed property does not hold."""

    def __init__(self, message: str, claims: List[str], summary: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.claims = list(claims)
        self.summary = dict(summary or {})
