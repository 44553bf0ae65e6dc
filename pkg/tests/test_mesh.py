import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import face_census, on_boundary, random_mesh
from stfem.mesh import (
    CorruptMeshError,
    FaceTag,
    SpaceTimeMesh,
    build_structured_mesh,
    mesh_size,
    refine,
    refine_uniformly,
    write_vtk,
)


@pytest.mark.parametrize("d,n,nv,ne", [(1, 1, 4, 2), (1, 2, 9, 8), (2, 1, 8, 6), (2, 3, 64, 162)])
def test_structured_counts(d, n, nv, ne):
    m = build_structured_mesh(d, n)
    assert m.n_vertices == nv
    assert m.n_elements == ne


@pytest.mark.parametrize("args", [(1, 0), (2, -1), (3, 2), (1, 2, 0.0), (1, 2, -1.0)])
def test_structured_rejects_bad_input(args):
    with pytest.raises(ValueError):
        build_structured_mesh(*args)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("T", [1.0, 2.5])
def test_structured_volume_and_tags(d, T):
    m = build_structured_mesh(d, 3, T)
    assert np.all(m.volumes > 0)
    assert math.isclose(m.volumes.sum(), T, rel_tol=1e-12)
    faces = m.faces
    for tag in FaceTag:
        idx = m.boundary_faces(tag)
        P = m.vertices[faces[idx]]
        t = P[..., -1]
        if tag is FaceTag.SigmaZero:
            assert np.all(t == 0.0)
        elif tag is FaceTag.SigmaT:
            assert np.allclose(t, T)
        elif tag is FaceTag.SigmaLateral:
            x = P[..., :-1]
            assert np.all(np.any(np.all((x == 0) | (x == 1), axis=1), axis=-1))
    # Sigma_0 and Sigma_T faces tile the spatial square
    nz = m.boundary_faces(FaceTag.SigmaZero).size
    assert nz == m.boundary_faces(FaceTag.SigmaT).size == (2 * 9 if d == 2 else 3)


def test_mesh_size_examples():
    m = build_structured_mesh(1, 1)
    assert math.isclose(mesh_size(m), math.sqrt(2))
    once = refine(m, [0, 1])
    assert once.n_elements == 4 and math.isclose(mesh_size(once), 1.0)
    fine = refine_uniformly(m)
    assert fine.n_elements == 8
    assert math.isclose(mesh_size(fine), math.sqrt(2) / 2)
    ref = SpaceTimeMesh(1, 1.0, [[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [2])
    assert math.isclose(mesh_size(ref), math.sqrt(2))
    assert np.allclose(m.diameters, math.sqrt(2))


def test_refine_mark_one_triangle_has_no_hanging_nodes():
    m = build_structured_mesh(1, 1)
    r = refine(m, [0])
    assert r.n_elements in (3, 4)
    census = face_census(r)
    for face, c in census.items():
        assert c == 2 or (c == 1 and on_boundary(r, face))
    assert math.isclose(r.volumes.sum(), 1.0, rel_tol=1e-12)


def test_refine_empty_is_identity():
    m = build_structured_mesh(2, 2)
    assert refine(m, []) is m
    assert refine(m, np.array([], dtype=int)) is m


def test_refine_rejects_bad_index():
    m = build_structured_mesh(1, 2)
    with pytest.raises((IndexError, ValueError)):
        refine(m, [m.n_elements])


@settings(max_examples=15, deadline=None)
@given(d=st.sampled_from([1, 2]), seed=st.integers(0, 10_000), steps=st.integers(1, 5))
def test_refine_conforming_volume_tags(d, seed, steps):
    rng = np.random.default_rng(seed)
    m = build_structured_mesh(d, 2)
    for _ in range(steps):
        marked = rng.choice(m.n_elements, size=max(1, m.n_elements // 5), replace=False)
        new = refine(m, marked)
        # every marked element was bisected: none survives as a child of itself
        kids = np.bincount(new.parent, minlength=m.n_elements)
        assert np.all(kids[marked] >= 2)
        assert np.allclose(np.bincount(new.parent, weights=new.volumes, minlength=m.n_elements), m.volumes)
        m = new
    assert np.all(m.volumes > 0)
    assert math.isclose(m.volumes.sum(), 1.0, rel_tol=1e-12)
    census = face_census(m)
    for face, c in census.items():
        assert c == 2 or (c == 1 and on_boundary(m, face))
    # no duplicate vertices
    assert np.unique(np.round(m.vertices, 12), axis=0).shape[0] == m.n_vertices
    # boundary tag audit
    faces = m.faces
    interior = m.face_owners[:, 1] >= 0
    assert np.all(m.face_tags[interior] == FaceTag.Interior)
    for f in np.flatnonzero(~interior):
        t = m.vertices[faces[f], -1]
        tag = m.face_tags[f]
        if np.all(t == 0):
            assert tag == FaceTag.SigmaZero
        elif np.allclose(t, 1.0):
            assert tag == FaceTag.SigmaT
        else:
            assert tag == FaceTag.SigmaLateral


@pytest.mark.parametrize("d", [1, 2])
def test_repeated_refinement_keeps_shape_regularity(d):
    m = build_structured_mesh(d, 1)
    base = (m.diameters**m.dim / m.volumes).max()
    for i in range(12 if d == 1 else 9):
        c = m.centroids
        m = refine(m, np.flatnonzero(np.linalg.norm(c - 0.3, axis=1) < 0.3 + 0.0 * i))
    ratio = (m.diameters**m.dim / m.volumes).max()
    assert ratio < 12 * base


def test_uniform_bisection_halves_h():
    m = build_structured_mesh(2, 1)
    m2 = refine_uniformly(m)
    assert m2.n_elements == 8 * m.n_elements
    assert math.isclose(mesh_size(m2), mesh_size(m) / 2)


def test_degenerate_simplex_rejected():
    with pytest.raises(CorruptMeshError):
        SpaceTimeMesh(1, 1.0, [[0, 0], [1, 0], [2, 0]], [[0, 1, 2]], [2])


def test_mesh_arrays_are_read_only():
    m = build_structured_mesh(1, 2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


@pytest.mark.parametrize("d", [1, 2])
def test_write_vtk(tmp_path, d):
    m = build_structured_mesh(d, 1)
    path = write_vtk(tmp_path / "m.vtk", m, point_data={"state": np.arange(m.n_vertices)},
                     cell_data={"eta2": np.ones(m.n_elements)})
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert f"POINTS {m.n_vertices} double" in text
    i = text.index(f"CELL_TYPES {m.n_elements}")
    assert set(text[i + 1:i + 1 + m.n_elements]) == {"5" if d == 1 else "10"}
    assert "SCALARS state double 1" in text and "SCALARS eta2 double 1" in text
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "bad.vtk", m, point_data={"x": np.zeros(2)})


def test_random_mesh_helper_is_conforming():
    m = random_mesh(2, 7, steps=3)
    assert all(c in (1, 2) for c in face_census(m).values())
