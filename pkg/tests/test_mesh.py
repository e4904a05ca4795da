import numpy as np
import pytest

from skelfit import mesh as ms


def ellipsoid_mesh(a, b, c, subdiv=3):
    m = ms.icosphere(subdiv)
    return ms.TriangleMesh(m.vertices * np.array([a, b, c]), m.faces)


def test_icosphere_counts_and_measures():
    m = ms.icosphere(3)
    m.validate()
    # 20 * 4^3 faces, V = E - F + 2 ... = 2 + F/2 for closed triangulations
    assert m.n_faces == 20 * 4 ** 3
    assert m.n_vertices == 2 + m.n_faces // 2
    assert abs(m.area() - 4 * np.pi) / (4 * np.pi) < 0.01
    assert abs(m.enclosed_volume() - 4 * np.pi / 3) / (4 * np.pi / 3) < 0.02
    assert np.allclose(m.centroid(), 0, atol=1e-12)


def test_validate_rejects_open_mesh():
    m = ms.icosphere(1)
    with pytest.raises(ms.MeshError, match="closed"):
        ms.TriangleMesh(m.vertices, m.faces[:-1]).validate()


def test_validate_rejects_inconsistent_orientation():
    m = ms.icosphere(1)
    f = m.faces.copy()
    f[0] = f[0, ::-1]
    with pytest.raises(ms.MeshError, match="orient"):
        ms.TriangleMesh(m.vertices, f).validate()


def test_validate_rejects_inward_orientation():
    m = ms.icosphere(1)
    with pytest.raises(ms.MeshError, match="inward"):
        ms.TriangleMesh(m.vertices, m.faces[:, ::-1]).validate()


def test_validate_rejects_wrong_euler_characteristic():
    # two disjoint tetrahedra: V - E + F = 4
    tet_v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    tet_f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    v = np.vstack([tet_v, tet_v + 10.0])
    f = np.vstack([tet_f, tet_f + 4])
    with pytest.raises(ms.MeshError, match="genus"):
        ms.TriangleMesh(v, f).validate()


def test_validate_rejects_degenerate_faces():
    m = ms.icosphere(1)
    v = np.vstack([m.vertices, m.vertices[m.faces[0, 0]]])
    f = m.faces.copy()
    dup = len(m.vertices)
    f = np.vstack([f, [[f[0, 0], dup, f[0, 1]]]])
    with pytest.raises(ms.MeshError):
        ms.TriangleMesh(v, f).validate()


@pytest.mark.parametrize("ext", ["obj", "off", "ply"])
def test_io_round_trip_exact(tmp_path, ext):
    m = ellipsoid_mesh(2.0, 1.2, 0.8, subdiv=1)
    m.vertices += np.pi * 1e-3  # exercise full-precision output
    path = tmp_path / f"mesh.{ext}"
    ms.save_mesh(m, str(path))
    back = ms.load_mesh(str(path))
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_io_byte_identical_rewrite(tmp_path):
    m = ellipsoid_mesh(1.3, 1.0, 0.7, subdiv=2)
    p1 = tmp_path / "a.ply"
    p2 = tmp_path / "b.ply"
    ms.save_mesh(m, str(p1))
    ms.save_mesh(ms.load_mesh(str(p1)), str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_unsupported_format(tmp_path):
    with pytest.raises(ms.MeshError):
        ms.save_mesh(ms.icosphere(0), str(tmp_path / "m.stl"))


def test_sphere_curvature():
    m = ms.icosphere(3, radius=2.0)
    cur = ms.estimate_curvatures(m)
    assert np.median(np.abs(cur.kappa1 - 0.5)) < 0.02
    assert np.median(np.abs(cur.kappa2 - 0.5)) < 0.02
    # directions orthonormal and tangent
    dots = np.einsum("ij,ij->i", cur.dir1, cur.dir2)
    assert np.max(np.abs(dots)) < 1e-8
    tang = np.einsum("ij,ij->i", cur.dir1, cur.normals)
    assert np.max(np.abs(tang)) < 1e-8


def test_ellipsoid_gaussian_curvature_analytic():
    a, b, c = 2.0, 1.2, 0.8
    m = ellipsoid_mesh(a, b, c, subdiv=3)
    cur = ms.estimate_curvatures(m)
    x, y, z = m.vertices.T
    h2 = x ** 2 / a ** 4 + y ** 2 / b ** 4 + z ** 2 / c ** 4
    K_true = 1.0 / (a * b * c) ** 2 / h2 ** 2
    rel = np.abs(cur.gaussian - K_true) / K_true
    assert np.median(rel) < 0.05


def test_detect_vertices_on_ellipsoid():
    a, b, c = 2.0, 1.2, 0.8
    m = ellipsoid_mesh(a, b, c, subdiv=3)
    pos, idx = ms.detect_vertices(m)
    # the two ends of the long axis, in either order
    xs = np.sort(pos[:, 0])
    assert abs(xs[0] + a) < 0.08 and abs(xs[1] - a) < 0.08
    assert np.linalg.norm(pos[:, 1:], axis=1).max() < 0.1


def test_detect_vertices_rejects_sphere():
    with pytest.raises(ms.MeshError):
        ms.detect_vertices(ms.icosphere(3))


def test_detect_crest_on_ellipsoid():
    a, b, c = 2.0, 1.2, 0.8
    m = ellipsoid_mesh(a, b, c, subdiv=3)
    crest = ms.detect_crest(m)
    assert crest.points.shape == (256, 3)
    # crest of a triaxial ellipsoid is the z = 0 principal ellipse
    assert np.max(np.abs(crest.points[:, 2])) < 0.05
    r = (crest.points[:, 0] / a) ** 2 + (crest.points[:, 1] / b) ** 2
    assert np.max(np.abs(r - 1.0)) < 0.05
    # bound the closed-form perimeter with Ramanujan's approximation
    h = ((a - b) / (a + b)) ** 2
    per = np.pi * (a + b) * (1 + 3 * h / (10 + np.sqrt(4 - 3 * h)))
    assert abs(crest.total_length - per) / per < 0.02
    # vertex slots split the loop at the long-axis ends
    v = crest.points[crest.vertex_slots]
    assert np.max(np.abs(np.abs(v[:, 0]) - a)) < 0.08
    # samples are uniformly spaced in arclength
    seg = np.linalg.norm(np.roll(crest.points, -1, axis=0) - crest.points,
                         axis=1)
    assert seg.std() / seg.mean() < 0.05


def test_projector_on_sphere():
    m = ms.icosphere(3)
    proj = ms.SurfaceProjector(m)
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((50, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    out = proj.project(pts * 1.5)
    assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 0.01
    # projecting face centroids is the identity
    a, b, c = m.face_corners()
    cent = (a + b + c) / 3.0
    out = proj.project(cent[:40])
    assert np.max(np.linalg.norm(out - cent[:40], axis=1)) < 1e-12


def test_contains_points_sphere():
    m = ms.icosphere(2)
    rng = np.random.default_rng(7)
    dirs = rng.standard_normal((30, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert ms.contains_points(m, dirs * 0.5).all()
    assert not ms.contains_points(m, dirs * 1.5).any()


def test_edge_faces_consistency():
    m = ms.icosphere(2)
    ef = m.edge_faces()
    assert (ef >= 0).all()
    edges = m.edges()
    # every edge's two faces both contain the edge's endpoints
    for k in [0, 17, 101]:
        for f in ef[k]:
            assert set(edges[k]) <= set(m.faces[f])


class TestSelfIntersections:
    def test_embedded_sphere_clean(self):
        assert len(ms.self_intersections(ms.icosphere(3))) == 0

    def test_interpenetrating_components_detected(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
        f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
        soup = ms.TriangleMesh(np.vstack([v, v + 0.2]), np.vstack([f, f + 4]))
        assert len(ms.self_intersections(soup)) > 0

    def test_piercing_pair_detected(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [0.2, 0.2, -0.5], [0.5, 0.2, 0.5], [0.2, 0.5, 0.5]], float)
        f = np.array([[0, 1, 2], [3, 4, 5]])
        assert len(ms.self_intersections(ms.TriangleMesh(v, f))) == 1

    def test_coplanar_overlap_detected_disjoint_clean(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [0.2, 0.2, 0], [1.2, 0.2, 0], [0.2, 1.2, 0]], float)
        f = np.array([[0, 1, 2], [3, 4, 5]])
        assert len(ms.self_intersections(ms.TriangleMesh(v, f))) == 1
        v2 = v.copy()
        v2[3:, 0] += 2.0
        assert len(ms.self_intersections(ms.TriangleMesh(v2, f))) == 0
