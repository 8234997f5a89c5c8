import numpy as np
import pytest

from pqcheck.catalog import (
    make_affine_pair,
    make_cp1_hprojective_pair,
    make_dini_pair,
    make_even_eps_claim,
    make_perturbed_dini,
    make_sphere_projective_pair,
)


@pytest.fixture(scope="session")
def affine():
    return make_affine_pair(2, 4.0)


@pytest.fixture(scope="session")
def dini():
    return make_dini_pair()


@pytest.fixture(scope="session")
def sphere():
    return make_sphere_projective_pair()


@pytest.fixture(scope="session")
def cp1():
    return make_cp1_hprojective_pair(2.0)


@pytest.fixture(scope="session")
def perturbed():
    return make_perturbed_dini()


@pytest.fixture(scope="session")
def even_eps():
    return make_even_eps_claim()


def central_diff(f, x, h=1e-6):
    """Central differences of ``f`` at ``x``; the derivative axis comes first."""
    x = np.asarray(x, dtype=float)
    out = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        out.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.array(out)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
