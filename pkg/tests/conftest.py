import numpy as np
import pytest

from dehazekit.config import ModelConfig
from dehazekit.model import DehazeModel

# Lines recorded by the acceptance tests, printed once at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SMALL = ModelConfig(channels=8, depths=(1, 1, 1, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_model64():
    return DehazeModel.seeded(SMALL, seed=1, dtype=np.float64)
