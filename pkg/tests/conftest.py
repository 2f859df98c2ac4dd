import time

import numpy as np
import pytest

from fwdinv.fem import assemble_stiffness, cap_electrodes, compute_transfer_matrix
from fwdinv.mesh import LayeredSphereSpec, build_layered_sphere_mesh

HOMOGENEOUS_RADIUS = 92.0
SIGMA = 0.33


@pytest.fixture(scope="session")
def tiny_ball():
    """Single-compartment ball, refinement 0 (1296 tets)."""
    return build_layered_sphere_mesh(LayeredSphereSpec((HOMOGENEOUS_RADIUS,), (SIGMA,), refinement=0))


@pytest.fixture(scope="session")
def ball():
    """Single-compartment ball, refinement 1."""
    return build_layered_sphere_mesh(LayeredSphereSpec((HOMOGENEOUS_RADIUS,), (SIGMA,), refinement=1))


@pytest.fixture(scope="session")
def ball_fine():
    """Single-compartment ball, refinement 2."""
    return build_layered_sphere_mesh(LayeredSphereSpec((HOMOGENEOUS_RADIUS,), (SIGMA,), refinement=2))


@pytest.fixture(scope="session")
def layered():
    """Default four-layer phantom at refinement 1."""
    return build_layered_sphere_mesh(LayeredSphereSpec(refinement=1))


@pytest.fixture(scope="session")
def ball_setup(ball):
    el = cap_electrodes(ball, 32)
    a = assemble_stiffness(ball)
    return ball, el, a, compute_transfer_matrix(a, el, 1e-10)


@pytest.fixture(scope="session")
def ball_fine_setup(ball_fine):
    el = cap_electrodes(ball_fine, 60)
    a = assemble_stiffness(ball_fine)
    return ball_fine, el, a, compute_transfer_matrix(a, el, 1e-9)


@pytest.fixture(scope="session")
def layered_setup(layered):
    el = cap_electrodes(layered, 40)
    a = assemble_stiffness(layered)
    return layered, el, a, compute_transfer_matrix(a, el, 1e-10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_ball_points(rng, n, radius, center=(0.0, 0.0, 0.0)):
    """Uniform points inside a ball (rejection sampling)."""
    out = []
    while len(out) < n:
        p = rng.uniform(-radius, radius, 3)
        if np.linalg.norm(p) < radius:
            out.append(p)
    return np.array(out) + np.asarray(center)


SETUP_SECONDS = {}
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def ball_r3_setup():
    """Homogeneous ball at refinement 3 with 60 cap electrodes (about 2.5 min to build)."""
    t0 = time.perf_counter()
    mesh = build_layered_sphere_mesh(LayeredSphereSpec((HOMOGENEOUS_RADIUS,), (SIGMA,), refinement=3))
    el = cap_electrodes(mesh, 60)
    tm = compute_transfer_matrix(assemble_stiffness(mesh), el, 1e-9)
    SETUP_SECONDS["ball_r3"] = time.perf_counter() - t0
    return mesh, el, tm


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
