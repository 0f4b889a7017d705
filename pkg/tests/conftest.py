import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from inklpose.substrate.tensor import precision

settings.register_profile("inkl", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("inkl")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
