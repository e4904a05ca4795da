import numpy as np
import pytest

from skelfit import mesh as ms
from skelfit.remesh import hausdorff_estimate, remesh_uniform


def test_sphere_5120_to_1280():
    m = ms.icosphere(4)  # 5120 faces
    out = remesh_uniform(m, 1280)
    out.validate()
    assert abs(out.n_faces - 1280) <= 0.02 * 1280
    fa = out.face_areas()
    assert fa.std() / fa.mean() <= 0.5
    assert hausdorff_estimate(out, m) <= 0.005 * m.bbox_diagonal()


def test_already_uniform_at_target():
    m = ms.icosphere(3)  # 1280 faces, already uniform
    out = remesh_uniform(m, 1280)
    out.validate()
    assert abs(out.n_faces - 1280) <= 0.02 * 1280
    assert hausdorff_estimate(out, m) <= 1e-3 * m.bbox_diagonal()
    assert abs(out.area() - m.area()) <= 0.01 * m.area()


def test_upsample_ellipsoid():
    m = ms.icosphere(3)
    m = ms.TriangleMesh(m.vertices * np.array([2.0, 1.2, 0.8]), m.faces)
    out = remesh_uniform(m, 1600)
    out.validate()
    assert abs(out.n_faces - 1600) <= 0.02 * 1600
    fa = out.face_areas()
    assert fa.std() / fa.mean() <= 0.5


def test_very_coarse_input_raises_hausdorff():
    # a 320-face eccentric ellipsoid has crease depth above the bound;
    # the remesher must report it rather than silently smooth it away
    m = ms.icosphere(2)
    m = ms.TriangleMesh(m.vertices * np.array([2.0, 1.2, 0.8]), m.faces)
    with pytest.raises(ms.MeshError, match="Hausdorff"):
        remesh_uniform(m, 1200, hausdorff_tol=0.001)


def test_genus_preserved_and_deterministic():
    m = ms.icosphere(3)
    a = remesh_uniform(m, 640)
    b = remesh_uniform(m, 640)
    # deterministic: identical outputs for identical inputs
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.faces, b.faces)
    V, F = a.n_vertices, a.n_faces
    E = len(a.edges())
    assert V - E + F == 2


def test_rejects_tiny_target():
    with pytest.raises(ms.MeshError):
        remesh_uniform(ms.icosphere(1), 4)
