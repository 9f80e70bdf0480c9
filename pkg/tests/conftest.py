import numpy as np
import pytest

from splatlab.diffusion import build_schedule


@pytest.fixture
def schedule():
    return build_schedule("linear-alphabar", 50, 0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
