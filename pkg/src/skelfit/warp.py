"""Deformation engines for landmark correspondences.

Two warp families cover the fitting pipeline: thin-plate splines (exact
or smoothed interpolation of displacements, with the 3D biharmonic
kernel U(r) = r) and landmark geodesic shooting (an energy-minimizing
diffeomorphism of all of space generated by initial momenta under a
Gaussian reproducing kernel).  Procrustes alignment, mean shapes, and
sequential composition round out the toolkit.

The shooting Hamiltonian is H(q, p) = 1/2 sum_ij (p_i . p_j) K(q_i, q_j)
with K the Gaussian kernel of width sigma; trajectories integrate the
point-vortex-like geodesic equations with classic RK4, and the fitting
gradient backpropagates through the discrete integrator, so it is the
exact gradient of the discretized objective.
"""

from dataclasses import dataclass
import json

import numpy as np

from ._json import dump_json
from .geometry import RigidMotion, matrix_to_rotvec

SCHEMA_VERSION = "1"


class WarpError(ValueError):
    """Invalid warp construction or fitting failure."""


# ---------------------------------------------------------------------------
# thin-plate splines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TPSWarp:
    """f(x) = A x + t + sum_j w_j |x - c_j| with TPS side conditions."""

    centers: np.ndarray      # (n, 3)
    coeffs: np.ndarray       # (n, 3) non-affine weights w
    affine: np.ndarray       # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        c = np.asarray(self.centers, float)
        w = np.asarray(self.coeffs, float)
        if c.ndim != 2 or c.shape[1] != 3 or w.shape != c.shape:
            raise WarpError("centers and coeffs must be matching (n, 3)")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "coeffs", w)
        object.__setattr__(self, "affine",
                           np.asarray(self.affine, float).reshape(3, 3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, float).reshape(3))
        scale = max(np.abs(w).max(initial=0.0), 1.0)
        if abs(w.sum(axis=0)).max() > 1e-8 * scale * len(c):
            raise WarpError("coefficients violate the zero-sum condition")
        moment_scale = scale * max(np.abs(c).max(initial=0.0), 1.0) * len(c)
        if np.abs(c.T @ w).max() > 1e-8 * moment_scale:
            raise WarpError("coefficients violate the first-moment condition")

    def apply(self, points):
        pts = np.atleast_2d(np.asarray(points, float))
        d = np.linalg.norm(pts[:, None, :] - self.centers[None, :, :],
                           axis=-1)
        out = d @ self.coeffs + pts @ self.affine.T + self.translation
        return out if np.ndim(points) == 2 else out[0]

    def bending_energy(self):
        """Quadratic form of the non-affine part, tr(w^T K w); rotation
        invariant for rotated fitting problems."""
        d = np.linalg.norm(self.centers[:, None, :]
                           - self.centers[None, :, :], axis=-1)
        return float(np.einsum("ij,ik,jk->", d, self.coeffs, self.coeffs))


def tps_fit(src, dst, lam=0.0):
    """Thin-plate-spline warp carrying src landmarks to dst.

    lam = 0 interpolates exactly; lam > 0 trades landmark residual for
    smoothness by relaxing the kernel block to K + lam * I.  Requires
    at least 4 non-coplanar, pairwise-distinct source landmarks.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise WarpError("src and dst must be matching (n, 3) arrays")
    n = len(src)
    if n < 4:
        raise WarpError("need at least 4 landmarks")
    if lam < 0:
        raise WarpError("regularization must be non-negative")
    d = np.linalg.norm(src[:, None, :] - src[None, :, :], axis=-1)
    if np.min(d[~np.eye(n, dtype=bool)]) == 0.0:
        raise WarpError("duplicate source landmarks make the system singular")
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[2] < 1e-10 * sv[0]:
        raise WarpError("source landmarks are coplanar")

    P = np.hstack([np.ones((n, 1)), src])
    A = np.zeros((n + 4, n + 4))
    A[:n, :n] = d + lam * np.eye(n)
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 4, 3))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise WarpError(f"singular TPS system: {exc}") from exc
    w = sol[:n]
    translation = sol[n]
    affine = sol[n + 1:].T
    return TPSWarp(centers=src.copy(), coeffs=w, affine=affine,
                   translation=translation)


# ---------------------------------------------------------------------------
# landmark geodesic shooting
# ---------------------------------------------------------------------------

def default_sigma(points):
    """Default kernel width: a quarter of the bounding-box diagonal."""
    pts = np.asarray(points, float)
    return 0.25 * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

@dataclass(frozen=True)
class GeodesicShoot:
    """Initial conditions of a landmark geodesic under a Gaussian kernel."""

    q0: np.ndarray       # (n, 3) control points
    p0: np.ndarray       # (n, 3) momenta
    sigma: float
    n_steps: int = 10

    def __post_init__(self):
        q = np.asarray(self.q0, float)
        p = np.asarray(self.p0, float)
        if q.ndim != 2 or q.shape[1] != 3 or p.shape != q.shape:
            raise WarpError("q0 and p0 must be matching (n, 3)")
        object.__setattr__(self, "q0", q)
        object.__setattr__(self, "p0", p)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if not self.sigma > 0:
            raise WarpError("kernel width must be positive")
        if self.n_steps < 10:
            raise WarpError("need at least 10 integration steps")

    def apply(self, points):
        return shoot_apply(self, points)


# Above this size the kernel math runs in single precision: the fitted
# deformations have residuals far above 1e-6 of scale, and the n^2 cost
# halves.  Small problems keep full precision for tight gradient checks.
_SINGLE_PRECISION_MIN = 256


def _shoot_dtype(n, precision="auto"):
    if precision == "auto":
        return np.float32 if n >= _SINGLE_PRECISION_MIN else np.float64
    return np.dtype(precision).type


class _ShootWork:
    """Preallocated n^2 scratch for one problem size.

    Repeated mmap/munmap of 10 MB temporaries dominates the runtime of
    the kernel algebra otherwise; three scratch matrices cover the RHS
    and its transpose-Jacobian products, and the pool keeps every RK4
    stage's Gram matrix alive between the forward and reverse passes.
    """

    def __init__(self, n, n_steps, dtype, pool=False):
        self.dtype = dtype
        self.B1 = np.empty((n, n), dtype)
        self.B2 = np.empty((n, n), dtype)
        self.B3 = np.empty((n, n), dtype)
        self.pool = np.empty((n_steps, 4, n, n), dtype) if pool else None


_work_cache = {}


def _get_work(n, n_steps, dtype):
    """Reuse workspaces across fits of the same size (stage-wise fitting
    alternates between two landmark counts)."""
    key = (n, n_steps, np.dtype(dtype).str)
    work = _work_cache.get(key)
    if work is None:
        while len(_work_cache) >= 4:
            _work_cache.pop(next(iter(_work_cache)))
        work = _ShootWork(n, n_steps, dtype, pool=True)
        _work_cache[key] = work
    return work


def _gram(q, sigma2, out):
    # exponent is -|q_i - q_j|^2 / 2 sigma^2 <= 0; the clamp removes
    # positive rounding residue that would overflow exp on runaway
    # line-search candidates
    np.dot(q, q.T, out=out)
    s = np.einsum("ij,ij->i", q, q)
    out *= 2.0
    out -= s[:, None]
    out -= s[None, :]
    out *= 0.5 / sigma2
    np.minimum(out, 0.0, out=out)
    np.exp(out, out=out)
    return out


def _cross_gram(x, q, sigma2):
    K = x @ q.T
    K *= 2.0
    K -= np.einsum("ij,ij->i", x, x)[:, None]
    K -= np.einsum("ij,ij->i", q, q)[None, :]
    K *= 0.5 / sigma2
    np.minimum(K, 0.0, out=K)
    np.exp(K, out=K)
    return K


def _rhs(q, p, sigma2, K, B):
    """Geodesic equations: qdot_i = sum_j K_ij p_j and
    pdot_i = (1/sigma^2) sum_j (p_i . p_j) K_ij (q_i - q_j).

    The pairwise sums reduce to matrix products: with A = K * (p p^T),
    sum_j A_ij (q_i - q_j) = rowsum(A)_i q_i - (A q)_i.  K receives the
    Gram matrix; B is scratch.
    """
    _gram(q, sigma2, K)
    qdot = K @ p
    np.dot(p, p.T, out=B)
    B *= K
    pdot = B.sum(axis=1)[:, None] * q
    pdot -= B @ q
    pdot /= sigma2
    return qdot, pdot


def _rhs_vjp(q, p, a, b, sigma2, K, B2, B3):
    """Transpose-Jacobian products of _rhs for cotangents (a, b).

    Returns (dF/dq)^T (a, b) and (dF/dp)^T (a, b) using the same
    rowsum/matmul reduction as the forward pass; K must hold the Gram
    matrix of q, and B2/B3 are scratch.
    """
    np.dot(a, p.T, out=B2)
    B2 *= K                                 # M: qdot sensitivity weights
    qbar = B2 @ q
    qbar += B2.T @ q
    rs = B2.sum(axis=1)
    rs += B2.sum(axis=0)
    qbar -= rs[:, None] * q
    qbar /= sigma2
    pbar = K @ a
    np.dot(b, q.T, out=B3)
    np.subtract(np.einsum("ij,ij->i", b, q)[:, None], B3,
                out=B3)                     # bd_ij = b_i . (q_i - q_j)
    np.multiply(K, B3, out=B2)              # W
    wp = B2 @ p
    wp += B2.T @ p
    wp /= sigma2
    pbar += wp
    np.dot(p, p.T, out=B2)
    B2 *= K                                 # A
    qbar += (B2.sum(axis=1)[:, None] * b - B2 @ b) / sigma2
    B2 *= B3                                # V = A * bd
    vq = B2 @ q
    vq += B2.T @ q
    rs = B2.sum(axis=1)
    rs += B2.sum(axis=0)
    vq -= rs[:, None] * q
    vq /= sigma2 * sigma2
    qbar += vq
    return qbar, pbar


def _integrate(q0, p0, sigma, n_steps, work=None, record=False):
    """RK4 integration of the geodesic over unit time.

    With record, returns the per-step stage states; their Gram matrices
    land in work.pool for the reverse pass.
    """
    if work is None:
        work = _ShootWork(len(q0), n_steps, _shoot_dtype(len(q0)),
                          pool=record)
    dt = work.dtype
    sigma2 = sigma * sigma
    h = dt(1.0 / n_steps)
    q = np.ascontiguousarray(q0, dt)
    p = np.ascontiguousarray(p0, dt)
    states = []
    for t in range(n_steps):
        Ks = work.pool[t] if record else (work.B1,) * 4
        z1 = (q, p)
        u1, g1 = _rhs(q, p, sigma2, Ks[0], work.B2)
        z2 = (q + (0.5 * h) * u1, p + (0.5 * h) * g1)
        u2, g2 = _rhs(*z2, sigma2, Ks[1], work.B2)
        z3 = (q + (0.5 * h) * u2, p + (0.5 * h) * g2)
        u3, g3 = _rhs(*z3, sigma2, Ks[2], work.B2)
        z4 = (q + h * u3, p + h * g3)
        u4, g4 = _rhs(*z4, sigma2, Ks[3], work.B2)
        q = q + (h / 6) * (u1 + 2 * u2 + 2 * u3 + u4)
        p = p + (h / 6) * (g1 + 2 * g2 + 2 * g3 + g4)
        if record:
            states.append((z1, z2, z3, z4))
    return (q, p, states) if record else (q, p)


def _reverse(states, lq, lp, sigma, n_steps, work):
    """Backpropagate endpoint cotangents through the recorded RK4 steps."""
    dt = work.dtype
    sigma2 = sigma * sigma
    h = dt(1.0 / n_steps)
    lq = np.ascontiguousarray(lq, dt)
    lp = np.ascontiguousarray(lp, dt)
    for t in range(n_steps - 1, -1, -1):
        z1, z2, z3, z4 = states[t]
        Ks = work.pool[t]
        gq4, gp4 = (h / 6) * lq, (h / 6) * lp
        cq4, cp4 = _rhs_vjp(*z4, gq4, gp4, sigma2, Ks[3], work.B2, work.B3)
        gq3 = (h / 3) * lq + h * cq4
        gp3 = (h / 3) * lp + h * cp4
        cq3, cp3 = _rhs_vjp(*z3, gq3, gp3, sigma2, Ks[2], work.B2, work.B3)
        gq2 = (h / 3) * lq + (0.5 * h) * cq3
        gp2 = (h / 3) * lp + (0.5 * h) * cp3
        cq2, cp2 = _rhs_vjp(*z2, gq2, gp2, sigma2, Ks[1], work.B2, work.B3)
        gq1 = (h / 6) * lq + (0.5 * h) * cq2
        gp1 = (h / 6) * lp + (0.5 * h) * cp2
        cq1, cp1 = _rhs_vjp(*z1, gq1, gp1, sigma2, Ks[0], work.B2, work.B3)
        lq = lq + cq1 + cq2 + cq3 + cq4
        lp = lp + cp1 + cp2 + cp3 + cp4
    return lq, lp


def shoot_energy(shoot):
    """Kinetic energy (Hamiltonian) 1/2 p0^T K(q0) p0 of a shoot."""
    n = len(shoot.q0)
    K = _gram(shoot.q0, shoot.sigma ** 2, np.empty((n, n)))
    return 0.5 * float(np.einsum("ij,ik,jk->", K, shoot.p0, shoot.p0))


def hamiltonian_trace(shoot):
    """H evaluated after every RK4 step (conservation diagnostic)."""
    n = len(shoot.q0)
    sigma2 = shoot.sigma ** 2
    h = 1.0 / shoot.n_steps
    K = np.empty((n, n))
    B = np.empty((n, n))
    q, p = shoot.q0.copy(), shoot.p0.copy()

    def ham(q, p):
        _gram(q, sigma2, K)
        return 0.5 * float(np.einsum("ij,ik,jk->", K, p, p))

    out = [ham(q, p)]
    for _ in range(shoot.n_steps):
        u1, g1 = _rhs(q, p, sigma2, K, B)
        u2, g2 = _rhs(q + 0.5 * h * u1, p + 0.5 * h * g1, sigma2, K, B)
        u3, g3 = _rhs(q + 0.5 * h * u2, p + 0.5 * h * g2, sigma2, K, B)
        u4, g4 = _rhs(q + h * u3, p + h * g3, sigma2, K, B)
        q = q + (h / 6.0) * (u1 + 2 * u2 + 2 * u3 + u4)
        p = p + (h / 6.0) * (g1 + 2 * g2 + 2 * g3 + g4)
        out.append(ham(q, p))
    return np.array(out)


def _objective(q0, p0, dst, sigma, data_weight, n_steps, K0, work):
    """Objective, RMS endpoint residual, and the recorded forward pass.

    The residual sums accumulate in double precision regardless of the
    working dtype so line-search comparisons stay reliable.
    """
    q1, _, states = _integrate(q0, p0, sigma, n_steps, work, record=True)
    resid = np.asarray(q1, np.float64) - np.asarray(dst, np.float64)
    kin = 0.5 * float((K0 @ p0).astype(np.float64).ravel()
                      @ np.asarray(p0, np.float64).ravel())
    E = kin + data_weight * float(np.einsum("ij,ij->", resid, resid))
    rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
    return E, rms, resid, states


def _grad_from_states(p0, resid, states, sigma, data_weight, n_steps,
                      K0, work):
    lq = (2.0 * data_weight) * resid
    lp = np.zeros_like(p0)
    _, lp0 = _reverse(states, lq, lp, sigma, n_steps, work)
    return K0 @ p0 + lp0


def _objective_and_grad(q0, p0, dst, sigma, data_weight, n_steps,
                        precision="auto"):
    n = len(q0)
    dt = _shoot_dtype(n, precision)
    work = _get_work(n, n_steps, dt)
    q0 = np.ascontiguousarray(q0, dt)
    p0 = np.ascontiguousarray(p0, dt)
    K0 = _gram(q0, sigma * sigma, np.empty((n, n), dt))
    E, rms, resid, states = _objective(q0, p0, dst, sigma, data_weight,
                                       n_steps, K0, work)
    grad = _grad_from_states(p0, resid, states, sigma, data_weight,
                             n_steps, K0, work)
    return E, np.asarray(grad, np.float64), rms


def shoot_fit(src, dst, sigma, data_weight=10.0, n_iters=100, n_steps=10,
              p0=None, rel_tol=1e-6, precision="auto"):
    """Fit initial momenta carrying src landmarks to dst.

    Minimizes 1/2 p0^T K p0 + data_weight * sum |phi(src_i) - dst_i|^2
    by gradient descent with backtracking line search; the gradient is
    the exact discrete adjoint of the RK4 integration.  p0 warm-starts
    the optimization (default zero).  Returns (GeodesicShoot, info) with
    info holding the objective trace and final RMS endpoint residual.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise WarpError("src and dst must be matching (n, 3) arrays")
    if not sigma > 0:
        raise WarpError("kernel width must be positive")
    scale = float(np.linalg.norm(src.max(axis=0) - src.min(axis=0)))
    if scale > 0 and not 0.05 * scale < sigma < 2.0 * scale:
        raise WarpError("kernel width outside (0.05, 2) x object scale")
    n = len(src)
    dt = _shoot_dtype(n, precision)
    work = _get_work(n, n_steps, dt)
    q0 = np.ascontiguousarray(src, dt)
    p = (np.zeros_like(q0) if p0 is None
         else np.ascontiguousarray(p0, dt))
    K0 = _gram(q0, sigma * sigma, np.empty((n, n), dt))
    E, rms, resid, states = _objective(q0, p, dst, sigma, data_weight,
                                       n_steps, K0, work)
    g = _grad_from_states(p, resid, states, sigma, data_weight, n_steps,
                          K0, work)
    trace = [E]
    n_evals = 1
    # first trial step targets a max velocity change near 0.1 sigma:
    # |delta v| ~ rowsum(K) * |delta p| for clustered points
    n_eff = float(K0.sum()) / n
    step = dt(0.1 * sigma / (n_eff * max(float(np.abs(g).max()), 1e-12)))
    increases = 0
    for _ in range(n_iters):
        gnorm2 = float(np.einsum("ij,ij->", g, g))
        if gnorm2 == 0.0:
            break
        accepted = False
        for _ in range(30):
            cand = p - step * g
            Ec, rms_c, resid_c, states = _objective(q0, cand, dst, sigma,
                                                    data_weight, n_steps,
                                                    K0, work)
            n_evals += 1
            if Ec <= E - 1e-4 * float(step) * gnorm2:
                accepted = True
                break
            step = dt(step * 0.5)
        if not accepted:
            break
        increases = increases + 1 if Ec > E else 0
        if increases >= 10:
            raise WarpError("objective increased for 10 consecutive steps")
        drop = E - Ec
        g = _grad_from_states(cand, resid_c, states, sigma, data_weight,
                              n_steps, K0, work)
        p, rms, E = cand, rms_c, Ec
        trace.append(E)
        step = dt(step * 1.3)
        if drop <= rel_tol * max(abs(E), 1e-30):
            break
    shoot = GeodesicShoot(q0=src.copy(), p0=np.asarray(p, np.float64),
                          sigma=sigma, n_steps=n_steps)
    return shoot, {"objective_trace": trace, "endpoint_rms": rms,
                   "iterations": len(trace) - 1, "n_evals": n_evals}


def shoot_apply(shoot, points, precision="auto"):
    """Advect probe points by the flow of a fitted shoot.

    Probes ride the time-dependent velocity field of the control points
    as passive particles, integrated jointly with the controls on the
    same RK4 grid (so a probe placed on a control follows it exactly).
    Outputs are input plus accumulated displacement, so zero momentum
    returns the probes unchanged to the bit.
    """
    pts = np.atleast_2d(np.asarray(points, float))
    n = len(shoot.q0)
    dt = _shoot_dtype(n, precision)
    K = np.empty((n, n), dt)
    B = np.empty((n, n), dt)
    sigma2 = shoot.sigma ** 2
    h = dt(1.0 / shoot.n_steps)
    q = np.ascontiguousarray(shoot.q0, dt)
    p = np.ascontiguousarray(shoot.p0, dt)
    x0 = np.ascontiguousarray(pts, dt)
    x = x0

    def full_rhs(q, p, x):
        qdot, pdot = _rhs(q, p, sigma2, K, B)
        xdot = _cross_gram(x, q, sigma2) @ p
        return qdot, pdot, xdot

    for _ in range(shoot.n_steps):
        k1 = full_rhs(q, p, x)
        k2 = full_rhs(q + (0.5 * h) * k1[0], p + (0.5 * h) * k1[1],
                      x + (0.5 * h) * k1[2])
        k3 = full_rhs(q + (0.5 * h) * k2[0], p + (0.5 * h) * k2[1],
                      x + (0.5 * h) * k2[2])
        k4 = full_rhs(q + h * k3[0], p + h * k3[1], x + h * k3[2])
        q = q + (h / 6) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        p = p + (h / 6) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        x = x + (h / 6) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    out = pts + (np.asarray(x, np.float64) - np.asarray(x0, np.float64))
    return out if np.ndim(points) == 2 else out[0]


def shoot_endpoints(shoot, precision="auto"):
    """Time-1 control positions and momenta of a shoot."""
    dt = _shoot_dtype(len(shoot.q0), precision)
    q0 = np.ascontiguousarray(shoot.q0, dt)
    p0 = np.ascontiguousarray(shoot.p0, dt)
    work = _ShootWork(len(q0), shoot.n_steps, dt)
    q1, p1 = _integrate(q0, p0, shoot.sigma, shoot.n_steps, work)
    dq = np.asarray(q1, np.float64) - np.asarray(q0, np.float64)
    dp = np.asarray(p1, np.float64) - np.asarray(p0, np.float64)
    return shoot.q0 + dq, shoot.p0 + dp


def transport_momenta(shoot, q_new):
    """Momenta at new control points reproducing the shoot's t=0 velocity.

    Solves K(q_new) p_new = v(q_new) where v is the initial velocity
    field of the shoot; used to warm-start a refit on an enlarged
    landmark set.
    """
    q_new = np.asarray(q_new, float)
    n = len(q_new)
    sigma2 = shoot.sigma ** 2
    v = _cross_gram(q_new, shoot.q0, sigma2) @ shoot.p0
    K = _gram(q_new, sigma2, np.empty((n, n)))
    K[np.diag_indices_from(K)] += 1e-8
    return np.linalg.solve(K, v)


# ---------------------------------------------------------------------------
# alignment and composition
# ---------------------------------------------------------------------------

def _kabsch(src, dst):
    """Best rotation R with dst ~ src @ R.T (both centered)."""
    H = src.T @ dst
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    return Vt.T @ D @ U.T


def procrustes_align(shapes, with_scale=False, tol=1e-10, max_iters=100):
    """Generalized Procrustes alignment of corresponded landmark sets.

    Rotation + translation (+ optional uniform scale); iterates Kabsch
    alignment to the evolving mean until the mean moves < tol.  Returns
    (aligned shapes, transforms) with transforms as (scale, RigidMotion)
    pairs such that aligned = scale * motion(original).
    """
    shapes = [np.asarray(s, float) for s in shapes]
    base = shapes[0].shape
    if any(s.shape != base for s in shapes):
        raise WarpError("shapes must share (n, 3) layout")
    if any(np.linalg.norm(s - s.mean(axis=0)) == 0.0 for s in shapes):
        raise WarpError("degenerate shape with zero spread")
    centers = [s.mean(axis=0) for s in shapes]
    work = [s - c for s, c in zip(shapes, centers)]
    rots = [np.eye(3) for _ in shapes]
    scales = [1.0 for _ in shapes]
    mean = work[0].copy()
    for _ in range(max_iters):
        for i, w in enumerate(work):
            R = _kabsch(w, mean)
            if with_scale:
                num = float(np.sum((w @ R.T) * mean))
                den = float(np.sum(w * w))
                s = num / den
            else:
                s = 1.0
            work[i] = s * (w @ R.T)
            rots[i] = R @ rots[i]
            scales[i] *= s
        new_mean = np.mean(work, axis=0)
        shift = float(np.abs(new_mean - mean).max())
        mean = new_mean
        if shift < tol:
            break
    transforms = []
    for R, s, c in zip(rots, scales, centers):
        motion = RigidMotion(matrix_to_rotvec(R), -s * (R @ c))
        transforms.append((s, motion))
    return work, transforms


def mean_shape(shapes):
    """Pointwise Euclidean mean of aligned, corresponded landmark sets."""
    shapes = [np.asarray(s, float) for s in shapes]
    if any(s.shape != shapes[0].shape for s in shapes):
        raise WarpError("shapes must share (n, 3) layout")
    return np.mean(shapes, axis=0)


@dataclass(frozen=True)
class Diffeo:
    """Sequential composition of warps, applied first-to-last."""

    warps: tuple

    def __post_init__(self):
        if not self.warps:
            raise WarpError("composition must contain at least one warp")
        object.__setattr__(self, "warps", tuple(self.warps))

    def apply(self, points):
        out = points
        for w in self.warps:
            out = w.apply(out)
        return out


def compose(warps):
    return Diffeo(tuple(warps))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def warp_to_dict(w):
    if isinstance(w, TPSWarp):
        return {"schema_version": SCHEMA_VERSION, "kind": "tps",
                "centers": w.centers, "coeffs": w.coeffs,
                "affine": w.affine, "translation": w.translation}
    if isinstance(w, GeodesicShoot):
        return {"schema_version": SCHEMA_VERSION, "kind": "shoot",
                "q0": w.q0, "p0": w.p0, "sigma": w.sigma,
                "n_steps": w.n_steps}
    if isinstance(w, Diffeo):
        return {"schema_version": SCHEMA_VERSION, "kind": "diffeo",
                "warps": [warp_to_dict(x) for x in w.warps]}
    raise WarpError(f"cannot serialize {type(w)!r}")


def warp_from_dict(d):
    if d.get("schema_version") != SCHEMA_VERSION:
        raise WarpError("unsupported warp schema version")
    kind = d.get("kind")
    if kind == "tps":
        return TPSWarp(centers=np.array(d["centers"], float),
                       coeffs=np.array(d["coeffs"], float),
                       affine=np.array(d["affine"], float),
                       translation=np.array(d["translation"], float))
    if kind == "shoot":
        return GeodesicShoot(q0=np.array(d["q0"], float),
                             p0=np.array(d["p0"], float),
                             sigma=float(d["sigma"]),
                             n_steps=int(d["n_steps"]))
    if kind == "diffeo":
        return Diffeo(tuple(warp_from_dict(x) for x in d["warps"]))
    raise WarpError(f"unknown warp kind {kind!r}")


def save_warp(w, path):
    with open(path, "w") as fh:
        fh.write(dump_json(warp_to_dict(w)))
        fh.write("\n")


def load_warp(path):
    with open(path) as fh:
        return warp_from_dict(json.load(fh))
