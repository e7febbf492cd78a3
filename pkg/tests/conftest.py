import numpy as np
import pytest

from gazeattn.numerics import seeded_stream

ACCEPTANCE_LINES = []  # (criterion number, line)


@pytest.fixture
def rng():
    return seeded_stream(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
