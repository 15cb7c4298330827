import numpy as np
import pytest

from diffproj.constraints import build_random_feasible


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def polytope():
    cs, anchor = build_random_feasible(8, 5, seed=3, margin=0.1)
    return cs


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
