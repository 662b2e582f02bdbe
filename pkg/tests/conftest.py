import sys

import numpy as np
import pytest

from fundus_forge.data import synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pool():
    """Twenty labelled 64x64 synthetic samples, shared across tests."""
    return synth_dataset(11, 20, (64, 64), prefix="t")


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
