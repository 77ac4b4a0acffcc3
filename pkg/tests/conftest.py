import numpy as np
import pytest

from mbot_core.config import AppConfig
from mbot_core.core_ot import SinkhornParams
from mbot_core.distributions import CostSpec, DiscreteDistribution


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def abs_cost():
    return CostSpec("abs")


@pytest.fixture
def sq_cost():
    return CostSpec("sq_euclidean")


@pytest.fixture
def pair_1d():
    """a = {0, 2}, b = {1, 5}"""
    return DiscreteDistribution(np.array([0.0, 2.0])), DiscreteDistribution(np.array([1.0, 5.0]))


@pytest.fixture
def integer_clouds_1d():
    a = DiscreteDistribution(np.array([0.0, 3.0, 1.0, 7.0]))
    b = DiscreteDistribution(np.array([2.0, 5.0, 4.0, 9.0]))
    return a, b


@pytest.fixture
def tight_params():
    return SinkhornParams(epsilon=0.1, tol=1e-11, max_iters=50000)


@pytest.fixture
def app_config(tmp_path):
    return AppConfig(str(tmp_path / "app_config.ini"))


@pytest.fixture
def write_cloud(tmp_path):
    """Write points to a headerless CSV under tmp_path and return its path"""

    def _write(name, points):
        path = tmp_path / name
        DiscreteDistribution(np.asarray(points, dtype=np.float64)).to_csv(path)
        return str(path)

    return _write
