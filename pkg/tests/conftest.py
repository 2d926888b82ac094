import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lqhmc.densities import standard_gaussian
from lqhmc.lq_space import Grid, GridDensity, box_indicator
from lqhmc.phase_flow import ExactGaussianRotation
from lqhmc.transfer_op import TransferOperator

settings.register_profile("lqhmc", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lqhmc")


def uniform_on(grid, low=-1.0, high=1.0):
    return box_indicator(grid, low, high)


@pytest.fixture(scope="session")
def gauss():
    return standard_gaussian()


@pytest.fixture(scope="session")
def grid512():
    return Grid(1, 8.0, 512)


@pytest.fixture(scope="session")
def grid128():
    return Grid(1, 8.0, 128)


@pytest.fixture(scope="session")
def op_mixing(grid512):
    return TransferOperator(ExactGaussianRotation(1.0), grid512)


@pytest.fixture(scope="session")
def op_quarter(grid512):
    return TransferOperator(ExactGaussianRotation(np.pi / 2), grid512)


@pytest.fixture(scope="session")
def op_resonant(grid512):
    return TransferOperator(ExactGaussianRotation(np.pi), grid512)


@pytest.fixture(scope="session")
def h_uniform(grid512):
    return uniform_on(grid512)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
