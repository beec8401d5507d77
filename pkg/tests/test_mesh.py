import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from needleforge.config import FoamSpec
from needleforge.errors import ConfigError
from needleforge.mesh import all_faces, build_foam_mesh, locate_point, signed_volumes


def det_volume(p0, p1, p2, p3):
    # independent 4x4 determinant form of the tet volume
    M = np.ones((4, 4))
    M[:, 1:] = [p0, p1, p2, p3]
    return np.linalg.det(M) / 6.0


def test_single_cube():
    m = build_foam_mesh(FoamSpec(size=(1.0, 1.0, 1.0), resolution=(1, 1, 1)))
    assert m.n_nodes == 8
    assert m.n_tets == 6


@settings(max_examples=20, deadline=None)
@given(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)))
def test_counts(res):
    nx, ny, nz = res
    m = build_foam_mesh(FoamSpec(size=(0.1, 0.2, 0.3), resolution=res))
    assert m.n_nodes == (nx + 1) * (ny + 1) * (nz + 1)
    assert m.n_tets == 6 * nx * ny * nz


def test_positive_volumes_by_determinant(small_mesh):
    m = small_mesh
    vols = np.array([det_volume(*m.nodes[t]) for t in m.tets])
    assert np.all(vols > 0)
    assert np.allclose(vols, signed_volumes(m.nodes, m.tets), rtol=1e-12)


def test_default_mesh_shape():
    m = build_foam_mesh(FoamSpec())
    assert (m.n_nodes, m.n_tets) == (891, 3840)
    assert np.all(signed_volumes(m.nodes, m.tets) > 0)
    assert np.isclose(signed_volumes(m.nodes, m.tets).sum(), 0.1 * 0.1 * 0.13, rtol=1e-10)


def test_fixed_nodes_on_far_face(small_mesh):
    m = small_mesh
    far = np.flatnonzero(np.isclose(m.nodes[:, 2], 0.05))
    assert np.array_equal(np.sort(m.fixed_nodes), far)


def test_watertight(small_mesh):
    key, _, _, _ = all_faces(small_mesh.tets)
    _, counts = np.unique(key, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    # boundary faces: 2 triangles per cell face on the box surface
    nx, ny, nz = 2, 3, 2
    assert (counts == 1).sum() == 4 * (nx * ny + ny * nz + nx * nz)
    assert len(small_mesh.surface_faces) == (counts == 1).sum()


def test_surface_normals_point_outward(small_mesh):
    m = small_mesh
    center = m.nodes.mean(axis=0)
    tri_center = m.nodes[m.surface_faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", m.surface_normals, tri_center - center) > 0)
    a, b, c = (m.nodes[m.surface_faces[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    assert np.all(np.einsum("ij,ij->i", n, m.surface_normals) > 0)


@pytest.mark.parametrize("bad", [dict(size=(0.0, 1, 1)), dict(size=(1, -1, 1)),
                                 dict(resolution=(0, 1, 1)), dict(resolution=(1, 1, -2))])
def test_invalid_spec(bad):
    with pytest.raises(ConfigError):
        build_foam_mesh(FoamSpec(**bad))


def test_locate_centroid(small_mesh):
    m = small_mesh
    for t in (0, 7, len(m.tets) - 1):
        c = m.nodes[m.tets[t]].mean(axis=0)
        tet, w = locate_point(m, c)
        assert tet == t
        assert np.allclose(w, 0.25, atol=1e-12)


def test_locate_vertex(small_mesh):
    m = small_mesh
    for node in (0, 5, m.n_nodes - 1):
        tet, w = locate_point(m, m.nodes[node])
        assert node in m.tets[tet]
        assert np.isclose(w.max(), 1.0, atol=1e-12)
        assert m.tets[tet][np.argmax(w)] == node


def test_locate_outside(small_mesh):
    assert locate_point(small_mesh, [0.0, 0.0, -0.001]) is None
    assert locate_point(small_mesh, [0.5, 0.0, 0.02]) is None


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.floats(-0.0199, 0.0199), st.floats(-0.0199, 0.0199), st.floats(1e-4, 0.0499)))
def test_locate_reconstruction(p):
    m = build_foam_mesh(FoamSpec(size=(0.04, 0.04, 0.05), resolution=(2, 3, 2)))
    tet, w = locate_point(m, p)
    assert np.all(w >= 0) and np.isclose(w.sum(), 1.0, atol=1e-14)
    assert np.allclose(w @ m.nodes[m.tets[tet]], p, atol=1e-12)


def test_locate_in_deformed_configuration(small_mesh):
    m = small_mesh
    A = np.array([[1.1, 0.05, 0.0], [0.0, 0.95, 0.02], [0.01, 0.0, 1.05]])
    pos = m.nodes @ A.T
    p = np.array([0.003, -0.004, 0.02])
    tet, w = locate_point(m, A @ p, positions=pos)
    assert np.allclose(w @ pos[m.tets[tet]], A @ p, atol=1e-12)
    # affine maps preserve barycentric coordinates
    tet0, w0 = locate_point(m, p)
    assert tet == tet0
    assert np.allclose(w, w0, atol=1e-12)


def test_cube_split_uses_main_diagonal():
    m = build_foam_mesh(FoamSpec(size=(1.0, 1.0, 1.0), resolution=(1, 1, 1)))
    # every tet of the Kuhn split contains both ends of the main diagonal
    lo = int(np.flatnonzero(np.all(m.nodes == m.nodes.min(axis=0), axis=1))[0])
    hi = int(np.flatnonzero(np.all(m.nodes == m.nodes.max(axis=0), axis=1))[0])
    for t in m.tets:
        assert lo in t and hi in t
    assert len({tuple(sorted(t)) for t in m.tets}) == 6
    assert all(len(set(t)) == 4 for t in m.tets)
    assert list(itertools.chain(*m.tets)).count(lo) == 6
