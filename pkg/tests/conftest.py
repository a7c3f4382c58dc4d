"""Shared fixtures.  Full-size campaigns are built once per session."""

import numpy as np
import pytest

from koopmpc import experiments as ex


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def vdp_data():
    return ex.vdp_data(seed=0)


@pytest.fixture(scope="session")
def motor_fit():
    return ex.motor_model(seed=0)


@pytest.fixture(scope="session")
def kdv_fit():
    return ex.kdv_model(seed=0)


def random_stable_system(rng, n, m, radius=0.9):
    """Random (A, B) with spectral radius ``radius``."""
    A = rng.standard_normal((n, n))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    return A, rng.standard_normal((n, m))


ACCEPTANCE_LINES = []


def report(number, title, ok, detail):
    """Record (and print) one acceptance line."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES,
                           key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
