import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dgflow.cli_harness import bundled_scenario, load_scenario  # noqa: E402
from dgflow.trajectory_solver import minimize_J  # noqa: E402


@functools.lru_cache(maxsize=None)
def scenario_params(name, **kw):
    return load_scenario(bundled_scenario(name)).params


@functools.lru_cache(maxsize=None)
def solved(name, N=None):
    """Direct minimiser of a bundled scenario (cached for the whole session)."""
    p = scenario_params(name)
    if N is not None:
        p = p.replace(N=N)
    return p, minimize_J(p)


@pytest.fixture
def quad():
    return scenario_params("quadratic")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
