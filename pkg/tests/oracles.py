"""Self-contained numeric oracles shared by the test suite.

Everything here is written directly against textbook definitions and
avoids the library's own code paths, so tests can compare the package
against an independent construction.
"""

import numpy as np


def ellipsoid_surface_distance(points, abc, iters=40):
    """Unsigned distance from points to an axis-aligned ellipsoid surface.

    Bisection on the Lagrange parameter of the closest-point problem
    x_i = q_i a_i^2 / (a_i^2 + t), written out from scratch so the oracle
    shares no code with the package's projection routine.  Valid for
    queries with a nonzero smallest-axis coordinate (interior queries on
    the symmetry plane of the smallest axis sit on the medial set, where
    this parameterization degenerates); the voxel grids used below avoid
    exact zeros by construction.
    """
    q = np.asarray(points, float)
    abc = np.asarray(abc, float)
    a2 = abc ** 2
    w = (q * abc) ** 2
    lo = np.full(len(q), -a2.min())
    hi = np.maximum(np.linalg.norm(q * abc, axis=1) - a2.min(), lo + abc.max())
    f = np.empty(len(q))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f[:] = w[:, 0] / (a2[0] + mid) ** 2
        f += w[:, 1] / (a2[1] + mid) ** 2
        f += w[:, 2] / (a2[2] + mid) ** 2
        take = f > 1.0
        lo = np.where(take, mid, lo)
        hi = np.where(take, hi, mid)
    t = 0.5 * (lo + hi)
    x = q * a2 / (a2 + t[:, None])
    return np.linalg.norm(x - q, axis=1)


def medial_crease_field(abc, n=256, depth_min=0.5):
    """Brute-force medial oracle from an n^3 sample of the distance field.

    Samples the unsigned boundary distance on an n^3 grid over the
    bounding box and locates, per (x, y) column, the crease of the field
    along z — the transversal direction of the medial sheet for an
    ellipsoid with distinct semi-axes.  A crease shows as a second
    difference drop of at least depth_min * dz (columns beyond the
    medial footprint only carry the smooth focal ridge, which stays
    below that); the kink position is then refined by intersecting
    lines fitted to three samples on either side.

    n must be even so no sample plane hits the symmetry plane exactly.
    Returns (xs, ys, zstar) with zstar[i, j] the refined crease height,
    NaN where the column has none.
    """
    a, b, c = np.asarray(abc, float)
    if n % 2:
        raise ValueError("n must be even")
    xs = np.linspace(-a, a, n)
    ys = np.linspace(-b, b, n)
    zs = np.linspace(-c, c, n)
    dz = zs[1] - zs[0]
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    d = np.empty((n, n, n), dtype=np.float32)
    inside = np.empty((n, n, n), dtype=bool)
    for k0 in range(0, n, 16):         # z-slabs keep memory flat
        k1 = min(k0 + 16, n)
        pts = np.stack([np.broadcast_to(X[..., None], (n, n, k1 - k0)),
                        np.broadcast_to(Y[..., None], (n, n, k1 - k0)),
                        np.broadcast_to(zs[k0:k1], (n, n, k1 - k0))],
                       axis=-1).reshape(-1, 3)
        d[:, :, k0:k1] = ellipsoid_surface_distance(pts, abc).reshape(
            n, n, k1 - k0)
        r = np.sum((pts / [a, b, c]) ** 2, axis=1).reshape(n, n, k1 - k0)
        inside[:, :, k0:k1] = r < 1.0

    dd = d.astype(float)
    sec = dd[:, :, :-2] + dd[:, :, 2:] - 2.0 * dd[:, :, 1:-1]
    ok = inside[:, :, :-2] & inside[:, :, 2:]
    sec = np.where(ok, sec, np.inf)
    kbest = np.argmin(sec, axis=2) + 1
    depth = -np.take_along_axis(sec, (kbest - 1)[:, :, None], axis=2)[:, :, 0]

    zstar = np.full((n, n), np.nan)
    ii, jj = np.nonzero(depth >= depth_min * dz)
    kk = kbest[ii, jj]
    good = (kk >= 3) & (kk <= n - 4)    # 3 interior samples per side
    for off in range(-3, 4):
        good &= inside[ii, jj, np.clip(kk + off, 0, n - 1)]
    ii, jj, kk = ii[good], jj[good], kk[good]
    col = dd[ii, jj]
    idx = np.arange(len(ii))[:, None]

    def line_fit(z, v):
        zm = z.mean(axis=1, keepdims=True)
        vm = v.mean(axis=1, keepdims=True)
        s = np.sum((z - zm) * (v - vm), axis=1) / np.sum((z - zm) ** 2, axis=1)
        return s, vm[:, 0] - s * zm[:, 0]

    sl, bl = line_fit(zs[kk[:, None] + np.array([-3, -2, -1])],
                      col[idx, kk[:, None] + np.array([-3, -2, -1])])
    sr, br = line_fit(zs[kk[:, None] + np.array([1, 2, 3])],
                      col[idx, kk[:, None] + np.array([1, 2, 3])])
    zstar[ii, jj] = (br - bl) / (sl - sr)
    return xs, ys, zstar


def medial_sheet_deviation(points, xs, ys, zstar, radius=3):
    """Transversal deviation of query points from the refined crease.

    For each query, reads the crease height of the nearest crease column
    within `radius` grid cells in (x, y) and returns |z - zstar|; NaN
    when no column is that near (point outside the oracle's footprint).
    """
    pts = np.asarray(points, float)
    out = np.full(len(pts), np.nan)
    hx = xs[1] - xs[0]
    hy = ys[1] - ys[0]
    nx, ny = len(xs), len(ys)
    for m, p in enumerate(pts):
        i0 = int(np.clip(round((p[0] - xs[0]) / hx), 0, nx - 1))
        j0 = int(np.clip(round((p[1] - ys[0]) / hy), 0, ny - 1))
        isl = slice(max(i0 - radius, 0), min(i0 + radius + 1, nx))
        jsl = slice(max(j0 - radius, 0), min(j0 + radius + 1, ny))
        block = zstar[isl, jsl]
        fin = np.isfinite(block)
        if not fin.any():
            continue
        bi, bj = np.nonzero(fin)
        r2 = (((xs[isl][bi] - p[0]) / hx) ** 2
              + ((ys[jsl][bj] - p[1]) / hy) ** 2)
        pick = np.argmin(r2)
        if r2[pick] <= radius ** 2:
            out[m] = abs(p[2] - block[bi[pick], bj[pick]])
    return out


def crease_footprint_matches(points_xy, xs, ys, zstar, radius=3):
    """True when crease columns and sheet samples cover each other.

    Every finite crease column must lie within `radius` cells of some
    sample, and every sample within `radius` cells of some column.
    """
    from scipy.spatial import cKDTree
    pts = np.asarray(points_xy, float)
    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    ii, jj = np.nonzero(np.isfinite(zstar))
    cols = np.stack([xs[ii] / hx, ys[jj] / hy], axis=1)
    samp = pts / [hx, hy]
    d1, _ = cKDTree(cols).query(samp, workers=1)
    d2, _ = cKDTree(samp).query(cols, workers=1)
    return bool(d1.max() <= radius and d2.max() <= radius)
