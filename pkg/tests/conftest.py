import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, d):
    m = rng.standard_normal((d, d))
    return m.T @ m + np.eye(d)
