import numpy as np
import pytest
from hypothesis import strategies as st

from oblrlab.checks import random_instance
from oblrlab.task import make_table_task


@pytest.fixture
def t1():
    return make_table_task([1.0], [[0.0, 1.0]])


@pytest.fixture
def t2():
    return make_table_task([0.5, 0.5], [[0.0, 1.0], [0.0, 1.0]])


seeds = st.integers(min_value=0, max_value=2**32 - 1)


def instance(seed, max_cells=12, **kw):
    return random_instance(np.random.default_rng(seed), max_cells, **kw)


# Acceptance outcomes, filled in by test_acceptance.py and echoed after the run.
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1])):
            terminalreporter.write_line(ACCEPTANCE[key])
