import numpy as np
import pytest

from qpns.action import NoiseSpec
from qpns.spectral import make_lattice


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def lat8():
    return make_lattice(8)


@pytest.fixture(scope="session")
def lat16():
    return make_lattice(16)


@pytest.fixture(scope="session")
def spec8(lat8):
    return NoiseSpec(lat8, alpha=2.0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
