import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# numba cannot cache functions that take other jitted functions as arguments
warnings.filterwarnings("ignore", message="Cannot cache compiled function")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
