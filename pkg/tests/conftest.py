import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ernet.tensor import make_rng

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=40,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def rng64():
    return make_rng(987654321)


def rand64(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape).astype(np.float64)
