import numpy as np
import pytest

from nsctl.grid_fem import setup_geometry


@pytest.fixture(scope="session")
def geom2():
    return setup_geometry(2)


@pytest.fixture(scope="session")
def geom3():
    return setup_geometry(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
