import numpy as np
import pytest

from prefixsub import tensor as T


@pytest.fixture
def f64():
    """Run the test in 64-bit mode."""
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
