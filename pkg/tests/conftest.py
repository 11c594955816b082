import numpy as np
import pytest

from censcausal import Regime, paper_dgp, simulate


@pytest.fixture(scope="session")
def spec22():
    return paper_dgp(-2.0, -2.0)


@pytest.fixture(scope="session")
def regime1():
    return Regime.static(1, 5)


@pytest.fixture(scope="session")
def panel1000(spec22):
    return simulate(spec22, 1000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
