import numpy as np
import pytest

from rareis.sde import brownian_motion, ornstein_uhlenbeck, overdamped_langevin


@pytest.fixture
def bm1():
    return brownian_motion(1)


@pytest.fixture
def bm2():
    return brownian_motion(2)


@pytest.fixture
def ou_model():
    return ornstein_uhlenbeck(mu=0.0, sigma=np.sqrt(2.0))


@pytest.fixture
def double_well_model():
    def grad_u(x):
        return 4.0 * x * (x * x - 1.0)
    return overdamped_langevin(grad_u, sigma=0.5, dim=1)
