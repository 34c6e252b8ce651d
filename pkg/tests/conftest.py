import numpy as np
import pytest

from rfnnest import networks as nw

# Narrow widths keep desk-scale training runs to seconds on one CPU core.
DESK_ARCH = dict(stem_channels=8, scale_channels=[16, 24, 32, 40])
TINY_ARCH = dict(stem_channels=2, scale_channels=[3, 4, 5, 6])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_arch():
    return nw.ArchitectureConfig(**DESK_ARCH)


@pytest.fixture
def tiny_arch():
    return nw.ArchitectureConfig(**TINY_ARCH)


# One line per acceptance criterion, echoed in the terminal summary so the
# verdicts are visible even when output capture is on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
