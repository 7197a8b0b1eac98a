import numpy as np
import pytest

from mfgsocial.cases import EvParams, ev_game
from mfgsocial.space import TrajectorySpace, unit_space


@pytest.fixture(scope="session")
def small_ev():
    """A 12-agent, 8-period charging instance shared across test modules."""
    params = EvParams(n=12, horizon=8, demand_range=(1.0, 2.5))
    return ev_game(params, seed=5)


@pytest.fixture(scope="session")
def default_ev():
    """The full default charging instance (N=100, T=36, seed 7)."""
    return ev_game(EvParams(), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def space4() -> TrajectorySpace:
    return unit_space(4)
