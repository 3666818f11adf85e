import numpy as np
import pytest

from rawadapter import numerics as nm


@pytest.fixture(autouse=True)
def float64_mode():
    with nm.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
