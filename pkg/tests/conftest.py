import math

import numpy as np
import pytest

from erar.mdp import TabularMdp

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    """Records one pass/fail line per criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


@pytest.fixture
def one_state_mdp():
    """One state, two actions with rewards 0 and 1."""
    return TabularMdp(1, 2, np.ones((1, 2, 1)), np.array([[0.0, 1.0]]))


@pytest.fixture
def two_state_cycle():
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    P[1, :, 0] = 1.0
    return TabularMdp(2, 2, P, np.array([[1.0, 0.0], [0.0, 2.0]]))


ONE_STATE_THETA = math.log((1.0 + math.e) / 2.0)
