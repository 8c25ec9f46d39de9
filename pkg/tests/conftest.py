import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from skimage import measure

from ktpolyrigid.mesh import SurfaceMesh
from ktpolyrigid.phantom import PhantomSpec, build_phantom
from ktpolyrigid.weights import solve_mesh_weights

settings.register_profile("ktpr", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ktpr")

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def tetra_mesh(scale=1.0) -> SurfaceMesh:
    V = scale * np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return SurfaceMesh(V, F)


def regular_tetra() -> SurfaceMesh:
    V = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]])
    F = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    m = SurfaceMesh(V, F)
    if m.signed_volume() < 0:
        m = SurfaceMesh(V, F[:, ::-1])
    return m


def sphere_mesh(n=27, radius=1.0) -> SurfaceMesh:
    """Marching-cubes sphere centred at the origin, outward oriented."""
    ext = 1.3 * radius
    g = np.linspace(-ext, ext, n)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    v, f, _, _ = measure.marching_cubes(np.sqrt(X ** 2 + Y ** 2 + Z ** 2) - radius, 0.0,
                                        spacing=(g[1] - g[0],) * 3, allow_degenerate=False)
    m = SurfaceMesh(v - ext, f)
    if m.signed_volume() < 0:
        m = SurfaceMesh(m.vertices, m.faces[:, ::-1])
    return m


def closest_on_triangle_oracle(p, a, b, c):
    """Brute force: plane projection if inside, else the best of the three edge clamps."""
    e1, e2 = b - a, c - a
    G = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    s, t = np.linalg.solve(G, [e1 @ (p - a), e2 @ (p - a)])
    if s >= 0 and t >= 0 and s + t <= 1:
        return a + s * e1 + t * e2
    best, bd = None, np.inf
    for u, v in ((a, b), (b, c), (c, a)):
        d = v - u
        q = u + np.clip((p - u) @ d / (d @ d), 0, 1) * d
        if np.linalg.norm(p - q) < bd:
            best, bd = q, np.linalg.norm(p - q)
    return best


@pytest.fixture(scope="session")
def tetra():
    return tetra_mesh()


@pytest.fixture(scope="session")
def sphere():
    return sphere_mesh()


@pytest.fixture(scope="session")
def chain():
    """Two-link chain phantom at 32^3 with solved volumetric weights."""
    ph = build_phantom(PhantomSpec(preset="chain", parts=2, resolution=32))
    wf = solve_mesh_weights(ph.mesh, ph.vertex_weights, ph.grid, ph.mask)
    return ph, wf
