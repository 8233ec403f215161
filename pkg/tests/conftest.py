import pytest
from hypothesis import HealthCheck, settings

from fgdd.moments import compute_moments

settings.register_profile(
    "fgdd",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fgdd")


@pytest.fixture(scope="session")
def tanh_moments():
    return compute_moments("tanh")


@pytest.fixture(scope="session")
def identity_moments():
    return compute_moments("identity")


@pytest.fixture(scope="session")
def relu_moments():
    return compute_moments("relu")
