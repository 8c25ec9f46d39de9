import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktpolyrigid.errors import BadIndex, OpenMesh
from ktpolyrigid.mesh import SurfaceMesh, closest_points, contains, voxelize, winding_number
from ktpolyrigid.volume import GridSpec

from conftest import closest_on_triangle_oracle, sphere_mesh, tetra_mesh

point = st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_tetra_is_closed_with_known_volume(tetra):
    tetra.validate()
    assert tetra.is_closed()
    assert tetra.signed_volume() == pytest.approx(1 / 6)
    assert tetra.bbox_diagonal() == pytest.approx(np.sqrt(3))


def test_open_and_inconsistent_meshes_rejected(tetra):
    with pytest.raises(OpenMesh, match="no opposite"):
        SurfaceMesh(tetra.vertices, tetra.faces[:3]).validate()
    flipped = tetra.faces.copy()
    flipped[0] = flipped[0, ::-1]
    with pytest.raises(OpenMesh):
        SurfaceMesh(tetra.vertices, flipped).validate()
    V = np.vstack([tetra.vertices, [[0.5, 0.5, 0.0]]])
    F = np.vstack([tetra.faces, [[0, 1, 4], [4, 1, 0]]])
    assert not SurfaceMesh(V, F).is_closed()
    with pytest.raises(BadIndex):
        SurfaceMesh(tetra.vertices, [[0, 1, 9]])


def test_degenerate_face_rejected():
    V = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0.0]])
    F = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]])
    with pytest.raises(OpenMesh, match="degenerate"):
        SurfaceMesh(V, F).validate()


def test_closest_points_against_brute_force():
    sphere = sphere_mesh(13)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.4, 1.4, (60, 3))
    face, bary, dist = closest_points(sphere, pts)
    V = sphere.vertices
    for p, f, b, d in zip(pts, face, bary, dist):
        ds = [np.linalg.norm(p - closest_on_triangle_oracle(p, *V[t])) for t in sphere.faces]
        assert d == pytest.approx(min(ds), abs=1e-12)
        q = b @ V[sphere.faces[f]]
        assert np.linalg.norm(q - p) == pytest.approx(d, abs=1e-12)
        assert b.min() >= -1e-12 and abs(b.sum() - 1) < 1e-12


def test_closest_points_chunking_is_consistent(sphere):
    pts = np.random.default_rng(1).normal(size=(500, 3))
    a = closest_points(sphere, pts)
    b = closest_points(sphere, pts, chunk=37)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_closest_points_tie_goes_to_smallest_face():
    m = tetra_mesh()
    # the origin vertex is shared by faces 0, 1 and 2
    face, bary, dist = closest_points(m, [[-1.0, -1.0, -1.0]])
    assert face[0] == 0 and dist[0] == pytest.approx(np.sqrt(3))


def test_winding_number_sphere(sphere):
    rng = np.random.default_rng(2)
    inner = rng.normal(size=(200, 3))
    inner *= rng.uniform(0, 0.85, (200, 1)) / np.linalg.norm(inner, axis=1, keepdims=True)
    outer = rng.normal(size=(200, 3))
    outer *= rng.uniform(1.15, 5, (200, 1)) / np.linalg.norm(outer, axis=1, keepdims=True)
    assert np.abs(winding_number(sphere, inner) - 1).max() < 1e-9
    assert np.abs(winding_number(sphere, outer)).max() < 1e-9
    flipped = SurfaceMesh(sphere.vertices, sphere.faces[:, ::-1])
    assert np.abs(winding_number(flipped, inner) + 1).max() < 1e-9
    assert contains(flipped, inner).all() and not contains(sphere, outer).any()


@given(point)
def test_winding_is_integer_away_from_surface(p):
    m = tetra_mesh()
    _, _, d = closest_points(m, p)
    if d[0] > 1e-3:
        w = winding_number(m, p)[0]
        assert min(abs(w), abs(w - 1)) < 1e-9


def test_voxelize_matches_sphere_volume():
    m = sphere_mesh(41, 10.0)
    spec = GridSpec((40, 40, 40), (0.6,) * 3, (-11.7,) * 3)
    mask = voxelize(m, spec)
    vol = mask.sum() * spec.voxel_volume
    assert vol == pytest.approx(m.signed_volume(), rel=0.02)
    X = spec.centers().reshape(-1, 3)[np.random.default_rng(3).choice(spec.size, 3000, replace=False)]
    _, _, d = closest_points(m, X)
    far = d > spec.spacing[0]
    assert np.array_equal(mask[tuple(np.rint(spec.to_index(X[far])).astype(int).T)], contains(m, X[far]))


def test_voxelize_axis_aligned_box():
    V = np.array([[x, y, z] for x in (0.5, 3.5) for y in (0.5, 2.5) for z in (0.5, 4.5)], float)
    # faces of the box with outward orientation
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    F = []
    for a, b, c, d in quads:
        F += [(a, b, c), (a, c, d)]
    m = SurfaceMesh(V, F)
    if m.signed_volume() < 0:
        m = SurfaceMesh(V, m.faces[:, ::-1])
    m.validate()
    mask = voxelize(m, GridSpec((6, 6, 6)))
    ref = np.zeros((6, 6, 6), bool)
    ref[1:4, 1:3, 1:5] = True
    assert np.array_equal(mask, ref)
