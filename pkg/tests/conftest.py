from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tokenwalk.objective import make_synthetic, solve_reference

settings.register_profile("tokenwalk", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tokenwalk")


@pytest.fixture(scope="session")
def logistic_desk():
    """The n=10, m=20, d=5 logistic instance used across modules."""
    return make_synthetic(10, 20, 5, "logistic", seed=1, sigma=1e-2)


@pytest.fixture(scope="session")
def logistic_desk_ref(logistic_desk):
    return solve_reference(logistic_desk)


@pytest.fixture(scope="session")
def small_quadratic():
    return make_synthetic(4, 3, 3, "quadratic", seed=5, sigma=0.1)


@pytest.fixture(scope="session")
def small_quadratic_ref(small_quadratic):
    return solve_reference(small_quadratic, 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report ---------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        request.config.stash[_ACCEPTANCE][number] = line
        print(line)
        return passed

    return record
