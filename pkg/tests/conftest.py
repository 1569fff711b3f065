import numpy as np
import pytest

from fbsde_hjb import bench
from fbsde_hjb.grid import GridSpec
from fbsde_hjb.hjb import solve_extended_hjb

X0 = 1.0


@pytest.fixture(scope="session")
def utility_params():
    return bench.UtilityParams()


@pytest.fixture(scope="session")
def utility_spec(utility_params):
    return bench.utility_problem(utility_params)


@pytest.fixture(scope="session")
def utility_grid(utility_params):
    lo, hi = bench.utility_window(utility_params, X0, 2.5)
    return GridSpec(lo, hi, 201, 800, 0.0, utility_params.T)


@pytest.fixture(scope="session")
def utility_solution(utility_spec, utility_grid):
    """Full-size solve of the portfolio benchmark, shared across modules."""
    return solve_extended_hjb(utility_spec, utility_grid, candidates=101)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
