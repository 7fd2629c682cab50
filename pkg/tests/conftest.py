import numpy as np
import pytest

from mdlod.fem import CoefficientSet
from mdlod.geometry import load_geometry
from mdlod.lod import setup
from mdlod.mesh import build_hierarchy

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cross():
    return load_geometry("cross")


@pytest.fixture(scope="session")
def small_cross(cross):
    """4x4 coarse cross mesh refined twice: 77 free fine dofs."""
    return build_hierarchy(cross, 4, 2)


def random_coefficients(rng, hier, smooth=False):
    n = hier.fine.n_cells
    ni = hier.fine.n_iface
    if smooth:
        return CoefficientSet(A0=lambda x, y: 1 + 0.5 * np.sin(3 * x) * np.cos(2 * y), A1=2.0, B1=0.7)
    return CoefficientSet(A0=rng.uniform(0.05, 2.0, n), A1=rng.uniform(0.5, 3.0, ni), B1=rng.uniform(0.2, 5.0, ni))


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture(scope="session")
def small_problem(small_cross):
    rng = np.random.default_rng(7)
    return setup(small_cross, random_coefficients(rng, small_cross))
