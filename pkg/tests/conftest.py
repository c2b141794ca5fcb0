import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meanscore.checks import random_cohort  # noqa: E402
from meanscore.model import LinkKind  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cohort():
    """300 subjects, J=4, d=2, cloglog data with one binary surrogate column."""
    r = np.random.default_rng(7)
    c = random_cohort(r, 300, 4, 2, LinkKind.CLOGLOG)
    z = (c.covariates[:, 0] + r.normal(0, 0.5, c.size) > 0).astype(np.int64)
    from meanscore.model import Cohort
    return Cohort(c.time_index, c.event, z.reshape(-1, 1), c.covariates, c.n_times)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
