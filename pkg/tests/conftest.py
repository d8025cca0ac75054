import numpy as np
import pytest


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_line_mask(rng, h, w, p=0.4):
    rows = rng.random(h) < p
    rows[h // 2] = True
    return np.repeat(rows[:, None], w, axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
