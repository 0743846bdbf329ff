"""
Shared fixtures for the test suites.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.flow.params import FlowParams  # noqa: E402
from core.mesh.grid import Grid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid8():
    return Grid(8)


@pytest.fixture
def grid16():
    return Grid(16)


@pytest.fixture
def grid32():
    return Grid(32)


@pytest.fixture
def small_params():
    """Coarse unsteady setting: n=8, five steps."""
    return FlowParams(mu=0.1, dt=0.1, t_final=0.5, n=8)


@pytest.fixture
def coupled_params():
    return FlowParams(mu=0.1, dt=0.1, t_final=0.5, n=8, pressure_scheme="coupled")
