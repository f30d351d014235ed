import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from dgkip.data import make_blobs

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(200, seed=0)


@pytest.fixture(scope="session")
def blobs_test():
    return make_blobs(200, seed=1)


def random_problem(rng, n=None, d=None):
    n = n or int(rng.integers(1, 51))
    d = d or int(rng.integers(1, 11))
    Phi = rng.normal(size=(n, d))
    y = rng.choice([-1.0, 1.0], size=n)
    return Phi, y


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
