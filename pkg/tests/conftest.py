import numpy as np
import pytest

from ima_bss.flow import available_backends


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


BACKENDS = available_backends()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
