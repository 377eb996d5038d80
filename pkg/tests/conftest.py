import numpy as np
import pytest
from hypothesis import settings

from helpers import synthetic_pair

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# lines appended by the acceptance tests, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dataset_and_aam():
    return synthetic_pair()


@pytest.fixture(scope="session")
def dataset(dataset_and_aam):
    return dataset_and_aam[0]


@pytest.fixture(scope="session")
def aam(dataset_and_aam):
    return dataset_and_aam[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
