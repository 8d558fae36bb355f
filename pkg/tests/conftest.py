import numpy as np
import pytest

from helpers import build_coeffs, build_grid, build_tgrid, build_u0

from fracmv.config import RunConfig


@pytest.fixture(scope="session")
def canonical_cfg() -> RunConfig:
    """The default configuration, shared by the acceptance checks."""
    return RunConfig()


@pytest.fixture(scope="session")
def small_grid():
    return build_grid()


@pytest.fixture(scope="session")
def small_coeffs(small_grid):
    return build_coeffs(small_grid)


@pytest.fixture(scope="session")
def small_u0(small_grid):
    return build_u0(small_grid)


@pytest.fixture(scope="session")
def small_tgrid():
    return build_tgrid()


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
