import os

import pytest

from tricrit_rg import covariance as cv
from tricrit_rg.lattice import ScaleContext


@pytest.fixture(scope="session")
def cache_dir():
    """Shared on-disk cache (the acceptance tables are expensive cold)."""
    return os.environ.get("TRICRIT_RG_CACHE", cv.default_cache_dir())


@pytest.fixture(scope="session")
def dec5():
    return cv.build(ScaleContext(L=2, n=1, m2=0.0, j_max=5))


@pytest.fixture(scope="session")
def dec5_massive():
    return cv.build(ScaleContext(L=2, n=1, m2=0.05, j_max=5))


@pytest.fixture(scope="session")
def dec7(cache_dir):
    return cv.build(ScaleContext(L=2, n=1, m2=0.0, j_max=7), cache_dir=cache_dir)


@pytest.fixture(scope="session")
def table1(cache_dir):
    return cv.beta_table(2, 1, 0.0, 2000, 9, cache_dir=cache_dir)


@pytest.fixture(scope="session")
def table0(cache_dir):
    return cv.beta_table(2, 0, 0.0, 2000, 9, cache_dir=cache_dir)


@pytest.fixture(scope="session")
def table1_massive(cache_dir):
    return cv.beta_table(2, 1, 0.01, 2000, 9, cache_dir=cache_dir)
