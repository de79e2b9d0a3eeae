import sys

import numpy as np
import pytest

from kodm.kuramoto_sde import preset


@pytest.fixture(scope="session")
def global100():
    return preset("global", 100)


@pytest.fixture(scope="session")
def local100():
    return preset("local", 100)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
