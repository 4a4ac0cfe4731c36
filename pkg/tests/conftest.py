import numpy as np
import pytest

from helioshdg.background import RadialBackground, constant_background
from helioshdg.hdg.field import WaveField
from helioshdg.hdg.reference import n_tet, tet_nodes
from helioshdg.mesh import build_cube, from_cells


def stratified_background(r_max=1.0, n=2001):
    """rho0 = exp(-20 r), c0 = 1, phi0 = 0."""
    return RadialBackground.from_functions(lambda r: np.exp(-20.0 * r), np.ones_like,
                                           np.zeros_like, r_max=r_max, n=n)


def single_cell_mesh():
    verts = np.array([[0.1, 0.0, 0.05], [0.9, 0.1, 0.0], [0.2, 0.8, 0.1], [0.15, 0.2, 0.7]])
    return from_cells(verts, [[0, 1, 2, 3]])


def two_cell_mesh():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
                      [0.6, 0.6, 0.6]])
    return from_cells(verts, [[0, 1, 2, 3], [1, 2, 3, 4]])


def centered_cube(n, length=1.0):
    return build_cube(n, length, origin=(-length / 2, -length / 2, -length / 2))


def interpolated_field(mesh, p, fn):
    """WaveField whose w is the order-p nodal interpolant of ``fn`` and u = 0."""
    X = mesh.vertices[mesh.cells]
    vol = []
    n = n_tet(p)
    for c in range(mesh.n_cells):
        pts = X[c, 0] + tet_nodes(p) @ (X[c, 1:] - X[c, :1])
        coef = np.zeros((4 * n, 1), dtype=complex)
        coef[3 * n:, 0] = fn(pts)
        vol.append(coef)
    return WaveField(mesh, np.full(mesh.n_cells, p), np.zeros(1, int), np.zeros((0, 1)), vol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def const_bg():
    return constant_background(r_max=2.0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
