import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def desk():
    from bandtok.config import desk_preset
    return desk_preset()


ACCEPTANCE_LINES = []


@pytest.fixture
def report_line():
    """Record one PASS/FAIL line; the lines are echoed in the terminal summary."""
    def record(n, name, passed, measured):
        line = f"{'PASS' if passed else 'FAIL'} criterion {n:>2} {name}: {measured}"
        print(line)
        ACCEPTANCE_LINES.append((n, line))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
