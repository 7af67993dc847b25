import numpy as np
import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    # all numeric tolerances and determinism checks assume serial BLAS
    with threadpool_limits(limits=1):
        yield


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
