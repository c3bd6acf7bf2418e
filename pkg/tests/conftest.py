import numpy as np
import pytest

from svmax_lab.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def unit_rows(rng, b, d):
    a = rng.normal(size=(b, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def finite_diff(f, x, h=1e-5):
    g = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the terminal summary prints them all."""
    def record(number, name, passed, detail):
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
