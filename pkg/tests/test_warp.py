import json
import pathlib

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from skelfit import warp as wp
from skelfit.geometry import RigidMotion, rotvec_to_matrix

DATA = pathlib.Path(__file__).parent / "data"


def fib_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1)


# ---------------------------------------------------------------------------
# thin-plate splines
# ---------------------------------------------------------------------------

def test_tps_identity():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(15, 3))
    w = wp.tps_fit(src, src)
    probes = rng.normal(size=(40, 3)) * 3.0
    assert np.abs(w.apply(probes) - probes).max() < 1e-10


def test_tps_pure_translation():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(12, 3))
    t = np.array([1.0, -2.0, 0.5])
    w = wp.tps_fit(src, src + t)
    assert np.abs(w.coeffs).max() < 1e-10
    probes = rng.normal(size=(30, 3)) * 5.0
    assert np.abs(w.apply(probes) - (probes + t)).max() < 1e-8


def test_tps_exact_interpolation():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(20, 3))
    dst = src + 0.2 * rng.normal(size=(20, 3))
    w = wp.tps_fit(src, dst)
    assert np.abs(w.apply(src) - dst).max() < 1e-8


def test_tps_regularized_trades_residual_for_smoothness():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(25, 3))
    dst = src + 0.3 * rng.normal(size=(25, 3))
    exact = wp.tps_fit(src, dst)
    smooth = wp.tps_fit(src, dst, lam=1.0)
    resid = np.abs(smooth.apply(src) - dst).max()
    assert resid > 1e-6
    assert smooth.bending_energy() < exact.bending_energy()


def test_tps_side_conditions():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(18, 3))
    dst = src + 0.2 * rng.normal(size=(18, 3))
    w = wp.tps_fit(src, dst)
    assert np.abs(w.coeffs.sum(axis=0)).max() < 1e-8
    assert np.abs(src.T @ w.coeffs).max() < 1e-8


def test_tps_bending_energy_rotation_invariant():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(16, 3))
    dst = src + 0.25 * rng.normal(size=(16, 3))
    w = wp.tps_fit(src, dst)
    R = rotvec_to_matrix([0.4, -0.8, 0.3])
    wr = wp.tps_fit(src @ R.T, dst @ R.T)
    assert abs(w.bending_energy() - wr.bending_energy()) < 1e-8


def test_tps_rejects_bad_input():
    rng = np.random.default_rng(6)
    src = rng.normal(size=(10, 3))
    with pytest.raises(wp.WarpError):
        wp.tps_fit(src[:3], src[:3])
    dup = src.copy()
    dup[3] = dup[7]
    with pytest.raises(wp.WarpError):
        wp.tps_fit(dup, dup + 0.1)
    flat = src.copy()
    flat[:, 2] = 0.0
    with pytest.raises(wp.WarpError):
        wp.tps_fit(flat, flat + 0.1)
    with pytest.raises(wp.WarpError):
        wp.tps_fit(src, src, lam=-1.0)


# ---------------------------------------------------------------------------
# geodesic shooting
# ---------------------------------------------------------------------------

def test_shoot_zero_momentum_identity():
    rng = np.random.default_rng(7)
    q0 = rng.normal(size=(30, 3))
    sh = wp.GeodesicShoot(q0=q0, p0=np.zeros_like(q0), sigma=1.0)
    probes = rng.normal(size=(50, 3))
    assert np.abs(sh.apply(probes) - probes).max() < 1e-12
    # the single-precision path (large control sets) is exact as well
    big = rng.normal(size=(300, 3))
    shb = wp.GeodesicShoot(q0=big, p0=np.zeros_like(big), sigma=1.0)
    assert np.abs(shb.apply(probes) - probes).max() < 1e-12


def test_shoot_single_particle_closed_form():
    # one particle: K = 1, momentum constant, endpoint q0 + p0
    q0 = np.array([[0.5, -0.2, 1.0]])
    p0 = np.array([[0.3, 0.1, -0.2]])
    sh = wp.GeodesicShoot(q0=q0, p0=p0, sigma=0.7, n_steps=20)
    q1, p1 = wp.shoot_endpoints(sh)
    assert np.abs(q1 - (q0 + p0)).max() < 1e-12
    assert np.abs(p1 - p0).max() < 1e-12


def test_shoot_hamiltonian_conservation():
    rng = np.random.default_rng(8)
    q0 = rng.normal(size=(12, 3))
    p0 = 0.3 * rng.normal(size=(12, 3))
    sh = wp.GeodesicShoot(q0=q0, p0=p0, sigma=1.0, n_steps=50)
    tr = wp.hamiltonian_trace(sh)
    assert np.abs(tr - tr[0]).max() / abs(tr[0]) < 1e-4


def test_adjoint_gradient_matches_finite_differences():
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        q0 = rng.normal(size=(10, 3))
        dst = q0 + 0.3 * rng.normal(size=(10, 3))
        p = 0.2 * rng.normal(size=(10, 3))
        _, g, _ = wp._objective_and_grad(q0, p, dst, 1.0, 10.0, 10)
        eps = 1e-6
        gfd = np.zeros_like(g)
        for i in range(10):
            for j in range(3):
                pp = p.copy()
                pp[i, j] += eps
                pm = p.copy()
                pm[i, j] -= eps
                ep = wp._objective_and_grad(q0, pp, dst, 1.0, 10.0, 10)[0]
                em = wp._objective_and_grad(q0, pm, dst, 1.0, 10.0, 10)[0]
                gfd[i, j] = (ep - em) / (2 * eps)
        rel = np.abs(g - gfd).max() / np.abs(gfd).max()
        assert rel < 1e-5


def test_shoot_fit_identity_target():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(20, 3))
    sh, info = wp.shoot_fit(src, src, sigma=1.0)
    assert np.abs(sh.p0).max() == 0.0
    assert info["endpoint_rms"] < 1e-12


def test_shoot_fit_two_ellipsoids_reference():
    sph = fib_sphere(120)
    src = sph * [3.0, 2.0, 1.0]
    dst = sph * [3.3, 2.0, 1.0]
    sh, info = wp.shoot_fit(src, dst, sigma=wp.default_sigma(src),
                            n_iters=200)
    assert info["endpoint_rms"] < 0.01 * 3.3
    golden = json.loads((DATA / "shoot_reference.json").read_text())
    assert info["endpoint_rms"] == pytest.approx(golden["endpoint_rms"],
                                                 rel=1e-3)
    # objective trace is monotone over accepted steps
    tr = info["objective_trace"]
    assert all(b <= a for a, b in zip(tr, tr[1:]))


def test_shoot_far_probe_decay():
    rng = np.random.default_rng(10)
    q0 = rng.normal(size=(15, 3))
    p0 = 0.4 * rng.normal(size=(15, 3))
    sh = wp.GeodesicShoot(q0=q0, p0=p0, sigma=0.5)
    far = q0.mean(axis=0) + np.array([[12.0, 0.0, 0.0]])   # > 10 sigma out
    moved = sh.apply(far)
    assert np.abs(moved - far).max() < 1e-6 * np.linalg.norm(p0)


def test_shoot_probe_on_control_follows_it():
    rng = np.random.default_rng(11)
    q0 = rng.normal(size=(25, 3))
    p0 = 0.3 * rng.normal(size=(25, 3))
    sh = wp.GeodesicShoot(q0=q0, p0=p0, sigma=1.0)
    q1, _ = wp.shoot_endpoints(sh)
    assert np.abs(sh.apply(q0) - q1).max() < 1e-10


def test_shoot_convergence_order():
    rng = np.random.default_rng(12)
    q0 = rng.normal(size=(10, 3))
    p0 = 0.3 * rng.normal(size=(10, 3))
    probes = rng.normal(size=(20, 3))
    ref = wp.GeodesicShoot(q0=q0, p0=p0, sigma=1.0, n_steps=80)
    x_ref = ref.apply(probes)
    e = []
    for n_steps in (10, 20):
        sh = wp.GeodesicShoot(q0=q0, p0=p0, sigma=1.0, n_steps=n_steps)
        e.append(np.abs(sh.apply(probes) - x_ref).max())
    assert e[0] / e[1] >= 12.0


def test_shoot_validation():
    q = np.zeros((5, 3))
    with pytest.raises(wp.WarpError):
        wp.GeodesicShoot(q0=q, p0=np.zeros((5, 3)), sigma=0.0)
    with pytest.raises(wp.WarpError):
        wp.GeodesicShoot(q0=q, p0=np.zeros((5, 3)), sigma=1.0, n_steps=5)
    with pytest.raises(wp.WarpError):
        wp.GeodesicShoot(q0=q, p0=np.zeros((4, 3)), sigma=1.0)
    rng = np.random.default_rng(13)
    src = rng.normal(size=(8, 3))
    with pytest.raises(wp.WarpError):
        wp.shoot_fit(src, src, sigma=100.0)     # far above object scale


def test_transport_momenta_reproduces_on_same_controls():
    rng = np.random.default_rng(14)
    q0 = rng.normal(size=(20, 3))
    p0 = 0.2 * rng.normal(size=(20, 3))
    sh = wp.GeodesicShoot(q0=q0, p0=p0, sigma=1.0)
    p_new = wp.transport_momenta(sh, q0)
    assert np.abs(p_new - p0).max() < 1e-5


# ---------------------------------------------------------------------------
# Procrustes alignment and mean shape
# ---------------------------------------------------------------------------

def test_procrustes_identical_shapes_under_rigid_motions():
    rng = np.random.default_rng(15)
    base = rng.normal(size=(30, 3))
    shapes = [base]
    for k in range(4):
        R = Rotation.random(random_state=np.random.RandomState(k)).as_matrix()
        shapes.append(base @ R.T + rng.normal(size=3))
    aligned, _ = wp.procrustes_align(shapes)
    for a in aligned[1:]:
        assert np.abs(a - aligned[0]).max() < 1e-8


def test_procrustes_single_shape_unchanged():
    rng = np.random.default_rng(16)
    shape = rng.normal(size=(12, 3))
    aligned, transforms = wp.procrustes_align([shape])
    assert np.abs(aligned[0] - (shape - shape.mean(axis=0))).max() < 1e-12
    s, motion = transforms[0]
    assert s == 1.0


def test_procrustes_matches_brute_force_rotation_search():
    rng = np.random.default_rng(17)
    A = rng.normal(size=(20, 3))
    R_true = Rotation.random(random_state=np.random.RandomState(5))
    B = A @ R_true.as_matrix().T + 0.05 * rng.normal(size=(20, 3))
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)

    def ssd(rotvec):
        return float(np.sum((Bc @ rotvec_to_matrix(rotvec).T - Ac) ** 2))

    # coarse rotation sweep, then local refinement of the best candidate
    grid = Rotation.random(3000, random_state=np.random.RandomState(6))
    best = min(grid.as_rotvec(), key=ssd)
    res = minimize(ssd, best, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14,
                            "maxiter": 5000})
    R_oracle = rotvec_to_matrix(res.x)
    R_mine = wp._kabsch(Bc, Ac)
    misfit = Rotation.from_matrix(R_oracle.T @ R_mine).magnitude()
    assert misfit < 1e-4


def test_procrustes_transforms_are_consistent():
    rng = np.random.default_rng(18)
    shapes = [rng.normal(size=(15, 3)) for _ in range(3)]
    aligned, transforms = wp.procrustes_align(shapes, with_scale=True)
    for shape, a, (s, motion) in zip(shapes, aligned, transforms):
        assert np.abs(s * motion.apply(shape) - a).max() < 1e-10


def test_procrustes_with_scale_recovers_scaling():
    rng = np.random.default_rng(19)
    base = rng.normal(size=(25, 3))
    shapes = [base, 2.5 * base]
    aligned, transforms = wp.procrustes_align(shapes, with_scale=True)
    assert np.abs(aligned[1] - aligned[0]).max() < 1e-8


def test_procrustes_rejects_degenerate():
    flat = np.zeros((10, 3))
    with pytest.raises(wp.WarpError):
        wp.procrustes_align([flat, flat])


def test_mean_shape():
    rng = np.random.default_rng(20)
    x = rng.normal(size=(10, 3))
    y = rng.normal(size=(10, 3))
    assert np.array_equal(wp.mean_shape([x]), x)
    assert np.abs(wp.mean_shape([x, y]) - 0.5 * (x + y)).max() < 1e-15
    c = np.array([1.0, 2.0, 3.0])
    m = wp.mean_shape([x, 2 * c - x])
    assert np.abs(m - c).max() < 1e-12


# ---------------------------------------------------------------------------
# composition and serialization
# ---------------------------------------------------------------------------

def test_compose_single_warp_is_identity_wrapper():
    rng = np.random.default_rng(21)
    src = rng.normal(size=(12, 3))
    dst = src + 0.2 * rng.normal(size=(12, 3))
    w = wp.tps_fit(src, dst)
    c = wp.compose([w])
    probes = rng.normal(size=(30, 3))
    assert np.abs(c.apply(probes) - w.apply(probes)).max() < 1e-12


def test_compose_applies_in_sequence():
    rng = np.random.default_rng(22)
    src = rng.normal(size=(10, 3))
    scale = wp.tps_fit(src, 2.0 * src)
    shift = wp.tps_fit(src, src + [1.0, 0.0, 0.0])
    probes = rng.normal(size=(20, 3))
    out = wp.compose([scale, shift]).apply(probes)
    assert np.abs(out - (2.0 * probes + [1.0, 0.0, 0.0])).max() < 1e-6
    out_rev = wp.compose([shift, scale]).apply(probes)
    assert np.abs(out_rev - 2.0 * (probes + [1.0, 0.0, 0.0])).max() < 1e-6


def test_compose_rejects_empty():
    with pytest.raises(wp.WarpError):
        wp.compose([])


def test_warp_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(23)
    src = rng.normal(size=(12, 3))
    dst = src + 0.2 * rng.normal(size=(12, 3))
    tps = wp.tps_fit(src, dst)
    shoot = wp.GeodesicShoot(q0=src, p0=0.1 * rng.normal(size=(12, 3)),
                             sigma=0.8, n_steps=12)
    combo = wp.compose([tps, shoot])
    probes = rng.normal(size=(15, 3))
    for i, w in enumerate([tps, shoot, combo]):
        path = tmp_path / f"warp_{i}.json"
        wp.save_warp(w, path)
        back = wp.load_warp(path)
        assert np.abs(back.apply(probes) - w.apply(probes)).max() < 1e-15
        # byte-identical re-save
        path2 = tmp_path / f"warp_{i}_again.json"
        wp.save_warp(back, path2)
        assert path.read_bytes() == path2.read_bytes()


def test_warp_serialization_rejects_unknown():
    with pytest.raises(wp.WarpError):
        wp.warp_from_dict({"schema_version": "1", "kind": "mystery"})
    with pytest.raises(wp.WarpError):
        wp.warp_from_dict({"schema_version": "999", "kind": "tps"})
