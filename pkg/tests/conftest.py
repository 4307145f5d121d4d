import numpy as np
import pytest

from lpt.data import synth_two_class


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def moons():
    return synth_two_class(64, noise=0.1, seed=0)
