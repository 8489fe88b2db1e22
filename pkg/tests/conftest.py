import numpy as np
import pytest

from roughflow.brownian import sample_path
from roughflow.fields import constant_field, linear_field
from roughflow.scenarios import get_scenario


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def additive_scenario():
    return get_scenario("additive-linear")


@pytest.fixture(scope="session")
def short_path():
    return sample_path(11, 1, 0.5, 2.0**-6)


@pytest.fixture(scope="session")
def sigma_field(additive_scenario):
    return additive_scenario.fields[0]
