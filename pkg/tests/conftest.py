"""Shared fixtures and a CI-safe hypothesis profile."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

SEED = 20260823


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def rng_factory():
    def make(offset: int = 0):
        return np.random.default_rng(SEED + offset)

    return make
