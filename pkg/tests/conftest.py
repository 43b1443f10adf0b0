import numpy as np
import pytest
from simple_error_log.errors import Errors

from grid_core import make_grid
from heat_solver import SolverConfig


@pytest.fixture
def grid_1d():
    return make_grid(1, [1.0], [32])


@pytest.fixture
def grid_2d():
    return make_grid(2, [1.0, 2.0], [12, 16])


@pytest.fixture
def implicit():
    return SolverConfig(dt=0.01)


@pytest.fixture
def errors():
    return Errors()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
