import warnings

import numpy as np
import pytest

from lowrank_nmt import autodiff as ad
from lowrank_nmt.layers import FactorizationWarning

ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.new_tape()
    yield
    ad.new_tape()


@pytest.fixture
def no_factor_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FactorizationWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
