import numpy as np
import pytest

from vocaldiff import build_cosine_schedule


@pytest.fixture(scope="session")
def sched():
    return build_cosine_schedule(800)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
