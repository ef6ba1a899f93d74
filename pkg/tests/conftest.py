import numpy as np
import pytest

from avrisk.params import gaussian_space


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def space20():
    return gaussian_space(20)


# one line per acceptance criterion, reprinted after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
