"""Discrete skeletal representations (s-reps).

An s-rep samples a folded skeletal sheet on a quadrilateral grid and
attaches a spoke to every grid point.  The sheet is parameterized by a
cyclic angle theta (around the fold) and tau1 in [0, 1] (spine to fold);
spokes carry the third coordinate tau2 in [-1, 1], the fraction of the
distance from the skeleton to the boundary, with negative values on the
south side.  Level sets of |tau2| are closed "onion skin" surfaces that
sweep from the doubled sheet (tau2 = 0) out to the object boundary
(|tau2| = 1).

The grid comprises a spine (the sheet's long axis), two vein rows per
theta column between spine and fold, and the fold loop itself.  Interior
points carry a north and a south spoke; fold points carry one spoke.
For slabular ellipsoids the whole structure is known analytically from
the Blum medial disk and serves as the reference from which all fitted
models descend.
"""

from dataclasses import dataclass, field
import json

import numpy as np
from scipy.special import ellipeinc

from ._json import dump_json
from .cmcf import Ellipsoid
from .geometry import Frame, unit
from .mesh import TriangleMesh, segment_distances, self_intersections

SCHEMA_VERSION = "1"

# finite-difference step for fitted-frame tangents, in (theta, tau1) units;
# well below one grid cell (2*pi/24 ~ 0.26, 1/3) and well above fp noise
FD_STEP = 1e-3


class SRepError(ValueError):
    """Invalid s-rep structure, coordinates, or degenerate geometry."""


# ---------------------------------------------------------------------------
# grid layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    """Sampling resolution of the skeletal grid.

    n_theta columns around the fold (one fold point each), spine_steps
    intervals along the spine (spine_steps + 1 spine points), vein rows
    at the tau1_levels, and interior onion skins at the tau2_levels.

    The fold columns at theta = +-pi/2 sit at the sheet's long-axis ends
    (the skeletal vertices), so n_theta must be a multiple of 4, and the
    feet of the theta columns enumerate the spine bijectively only when
    spine_steps == n_theta / 2.
    """

    n_theta: int = 24
    spine_steps: int = 12
    tau1_levels: tuple = (1.0 / 3.0, 2.0 / 3.0)
    tau2_levels: tuple = (0.25, 0.5, 0.75)

    def __post_init__(self):
        object.__setattr__(self, "tau1_levels", tuple(float(v) for v in self.tau1_levels))
        object.__setattr__(self, "tau2_levels", tuple(float(v) for v in self.tau2_levels))
        if self.n_theta < 8 or self.n_theta % 4 != 0:
            raise SRepError("n_theta must be a multiple of 4 and >= 8")
        if self.spine_steps < 2 or self.spine_steps != self.n_theta // 2:
            raise SRepError("spine_steps must equal n_theta / 2 (feet of the "
                            "theta columns must enumerate the spine)")
        for levels in (self.tau1_levels, self.tau2_levels):
            arr = np.asarray(levels)
            if len(arr) == 0 or np.any(arr <= 0) or np.any(arr >= 1) \
                    or np.any(np.diff(arr) <= 0):
                raise SRepError("levels must be strictly increasing in (0, 1)")

    # -- derived sizes -------------------------------------------------------

    @property
    def n_spine(self):
        return self.spine_steps + 1

    @property
    def n_vein_levels(self):
        return len(self.tau1_levels)

    @property
    def n_interior(self):
        return self.n_spine + self.n_theta * self.n_vein_levels

    @property
    def n_points(self):
        return self.n_interior + self.n_theta

    @property
    def n_spokes(self):
        return 2 * self.n_interior + self.n_theta

    @property
    def tau1_rows(self):
        """All tau1 grid rows including spine (0) and fold (1)."""
        return (0.0,) + self.tau1_levels + (1.0,)

    @property
    def thetas(self):
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    # -- index maps ----------------------------------------------------------

    def foot_of_column(self, k):
        """Spine index at the tau1 = 0 end of theta column k."""
        q = self.n_theta // 4
        k = int(k) % self.n_theta
        if k <= q:
            return k + q
        if k < 3 * q:
            return 3 * q - k
        return k - 3 * q

    def canonical_column(self, spine_index):
        """The y >= 0 theta column whose foot is the given spine point."""
        q = self.n_theta // 4
        i = int(spine_index)
        if not 0 <= i <= 2 * q:
            raise SRepError("spine index out of range")
        return i + 3 * q if i < q else i - q

    def spine_id(self, i):
        return int(i)

    def vein_id(self, k, j):
        return self.n_spine + int(k) * self.n_vein_levels + int(j)

    def fold_id(self, k):
        return self.n_spine + self.n_theta * self.n_vein_levels + int(k)

    def column_point_ids(self, k):
        """Skeletal point ids along column k, spine foot to fold."""
        return ([self.spine_id(self.foot_of_column(k))]
                + [self.vein_id(k, j) for j in range(self.n_vein_levels)]
                + [self.fold_id(k)])

    def to_dict(self):
        return {"n_theta": self.n_theta, "spine_steps": self.spine_steps,
                "tau1_levels": list(self.tau1_levels),
                "tau2_levels": list(self.tau2_levels)}

    @classmethod
    def from_dict(cls, d):
        return cls(n_theta=int(d["n_theta"]), spine_steps=int(d["spine_steps"]),
                   tau1_levels=tuple(d["tau1_levels"]),
                   tau2_levels=tuple(d["tau2_levels"]))


# ---------------------------------------------------------------------------
# coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SRepCoords:
    """Object coordinates (theta, tau1, tau2) plus a side flag.

    The side flag only matters at tau2 = 0, where both sides of the
    doubled sheet share positions but carry distinct frames; elsewhere
    the sign of tau2 determines the side (negative = south).
    """

    theta: float
    tau1: float
    tau2: float
    side: str = None

    def __post_init__(self):
        if not (0.0 <= self.tau1 <= 1.0):
            raise SRepError("tau1 out of [0, 1]")
        if not (-1.0 <= self.tau2 <= 1.0):
            raise SRepError("tau2 out of [-1, 1]")
        if self.side is not None and self.side not in ("N", "S"):
            raise SRepError("side must be 'N' or 'S'")
        object.__setattr__(self, "theta", float(self.theta) % (2.0 * np.pi))

    @property
    def effective_side(self):
        if self.tau2 > 0:
            return "N"
        if self.tau2 < 0:
            return "S"
        return self.side or "N"


def normalize_coords(theta, tau1, tau2):
    """Fold out-of-range (theta, tau1, tau2) back into the chart.

    Crossing the spine (tau1 < 0) continues onto the column at pi - theta
    on the same side; crossing the fold (tau1 > 1) continues on the other
    side, flipping the sign of tau2.
    """
    for _ in range(8):
        if tau1 < 0.0:
            tau1 = -tau1
            theta = np.pi - theta
        elif tau1 > 1.0:
            tau1 = 2.0 - tau1
            tau2 = -tau2
        else:
            break
    else:
        raise SRepError("tau1 too far out of range to normalize")
    return theta % (2.0 * np.pi), tau1, tau2


# ---------------------------------------------------------------------------
# the s-rep proper
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SRep:
    """A sampled skeletal sheet with spokes.

    Interior spoke arrays are ordered spine 0..S, then veins column-major
    (theta column k outer, tau1 level inner), matching GridConfig ids.
    Directions are unit vectors; lengths are positive model units.
    Instances are immutable; all queries are pure.
    """

    grid: GridConfig
    spine_points: np.ndarray
    vein_points: np.ndarray
    fold_points: np.ndarray
    north_dir: np.ndarray
    north_len: np.ndarray
    south_dir: np.ndarray
    south_len: np.ndarray
    fold_dir: np.ndarray
    fold_len: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        g = self.grid
        shapes = {
            "spine_points": (g.n_spine, 3),
            "vein_points": (g.n_theta, g.n_vein_levels, 3),
            "fold_points": (g.n_theta, 3),
            "north_dir": (g.n_interior, 3), "north_len": (g.n_interior,),
            "south_dir": (g.n_interior, 3), "south_len": (g.n_interior,),
            "fold_dir": (g.n_theta, 3), "fold_len": (g.n_theta,),
        }
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), float))
            if arr.shape != shape:
                raise SRepError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("north_len", "south_len", "fold_len"):
            if np.any(getattr(self, name) <= 0):
                raise SRepError(f"{name}: spoke lengths must be positive")
        for name in ("north_dir", "south_dir", "fold_dir"):
            n = np.linalg.norm(getattr(self, name), axis=1)
            if np.any(np.abs(n - 1.0) > 1e-9):
                raise SRepError(f"{name}: directions must be unit vectors")

    # -- point tables --------------------------------------------------------

    @property
    def skeletal_points(self):
        """All skeletal points, (n_points, 3), grid id order."""
        if "skeletal" not in self._cache:
            pts = np.vstack([self.spine_points,
                             self.vein_points.reshape(-1, 3),
                             self.fold_points])
            pts.setflags(write=False)
            self._cache["skeletal"] = pts
        return self._cache["skeletal"]

    @property
    def interior_points(self):
        return self.skeletal_points[:self.grid.n_interior]

    @property
    def point_theta(self):
        """Canonical theta per skeletal point (spine uses its y >= 0 column)."""
        if "theta" not in self._cache:
            g = self.grid
            th = np.empty(g.n_points)
            for i in range(g.n_spine):
                th[i] = g.thetas[g.canonical_column(i)]
            for k in range(g.n_theta):
                for j in range(g.n_vein_levels):
                    th[g.vein_id(k, j)] = g.thetas[k]
                th[g.fold_id(k)] = g.thetas[k]
            th.setflags(write=False)
            self._cache["theta"] = th
        return self._cache["theta"]

    @property
    def point_tau1(self):
        if "tau1" not in self._cache:
            g = self.grid
            t = np.empty(g.n_points)
            t[:g.n_spine] = 0.0
            for k in range(g.n_theta):
                for j, lev in enumerate(g.tau1_levels):
                    t[g.vein_id(k, j)] = lev
                t[g.fold_id(k)] = 1.0
            t.setflags(write=False)
            self._cache["tau1"] = t
        return self._cache["tau1"]

    def boundary_points(self):
        """Spoke tips, (n_spokes, 3), ordered interior N, interior S, fold."""
        interior = self.interior_points
        tips_n = interior + self.north_len[:, None] * self.north_dir
        tips_s = interior + self.south_len[:, None] * self.south_dir
        tips_f = self.fold_points + self.fold_len[:, None] * self.fold_dir
        return np.vstack([tips_n, tips_s, tips_f])

    def scale(self):
        """Bounding-box diagonal over skeleton plus boundary."""
        if "scale" not in self._cache:
            pts = np.vstack([self.skeletal_points, self.boundary_points()])
            self._cache["scale"] = float(
                np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        return self._cache["scale"]

    def transformed(self, motion):
        """The s-rep moved rigidly; lengths are preserved."""
        return SRep(
            grid=self.grid,
            spine_points=motion.apply(self.spine_points),
            vein_points=motion.apply(
                self.vein_points.reshape(-1, 3)).reshape(self.vein_points.shape),
            fold_points=motion.apply(self.fold_points),
            north_dir=motion.apply_vectors(self.north_dir),
            north_len=self.north_len,
            south_dir=motion.apply_vectors(self.south_dir),
            south_len=self.south_len,
            fold_dir=motion.apply_vectors(self.fold_dir),
            fold_len=self.fold_len,
        )

    # -- interpolation grids -------------------------------------------------

    def _grids(self):
        """Per-side (position, direction, log-length, tip) arrays on the
        (n_theta, tau1 row) lattice; fold row shared between sides."""
        if "grids" in self._cache:
            return self._cache["grids"]
        g = self.grid
        rows = len(g.tau1_rows)
        pos = np.empty((g.n_theta, rows, 3))
        dirs = {"N": np.empty((g.n_theta, rows, 3)),
                "S": np.empty((g.n_theta, rows, 3))}
        logl = {"N": np.empty((g.n_theta, rows)),
                "S": np.empty((g.n_theta, rows))}
        for k in range(g.n_theta):
            ids = g.column_point_ids(k)
            for r, pid in enumerate(ids[:-1]):
                pos[k, r] = self.skeletal_points[pid]
                dirs["N"][k, r] = self.north_dir[pid]
                dirs["S"][k, r] = self.south_dir[pid]
                logl["N"][k, r] = np.log(self.north_len[pid])
                logl["S"][k, r] = np.log(self.south_len[pid])
            pos[k, rows - 1] = self.fold_points[k]
            for side in ("N", "S"):
                dirs[side][k, rows - 1] = self.fold_dir[k]
                logl[side][k, rows - 1] = np.log(self.fold_len[k])
        tips = {side: pos + np.exp(logl[side])[:, :, None] * dirs[side]
                for side in ("N", "S")}
        self._cache["grids"] = (pos, dirs, logl, tips)
        return self._cache["grids"]


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def _hermite(p0, p1, m0, m1, t):
    t2 = t * t
    t3 = t2 * t
    return ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * m0
            + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * m1)


def _cubic_periodic(values, x):
    """Catmull-Rom on a uniform cyclic grid, vectorized over queries.

    values: (n, ...) cyclic control points; x: (m,) positions in cell
    units.  Returns (m, ...).
    """
    n = len(values)
    x = np.asarray(x, float)
    base = np.floor(x)
    t = x - base
    k1 = base.astype(int) % n
    k0, k2, k3 = (k1 - 1) % n, (k1 + 1) % n, (k1 + 2) % n
    m1 = 0.5 * (values[k2] - values[k0])
    m2 = 0.5 * (values[k3] - values[k1])
    tshape = t.reshape(t.shape + (1,) * (values.ndim - 1))
    return _hermite(values[k1], values[k2], m1, m2, tshape)


def _row_tangents(xs, values):
    """Interval-weighted finite-difference tangents along axis 0.

    Second-order accurate on nonuniform grids and linear-precision exact;
    one-sided at the ends.
    """
    n = len(xs)
    shape = (1,) * (values.ndim - 1)
    h = np.diff(xs).reshape((n - 1,) + shape)
    d = np.diff(values, axis=0) / h
    m = np.empty_like(values)
    m[0] = d[0]
    m[-1] = d[-1]
    hl, hr = h[:-1], h[1:]
    m[1:-1] = (hr * d[:-1] + hl * d[1:]) / (hl + hr)
    return m


def _cubic_rows(xs, values, x):
    """Hermite spline over nonuniform rows; values (R, m, ...) per-query
    columns, x (m,) query positions.  Node-exact with linear precision."""
    xs = np.asarray(xs, float)
    x = np.asarray(x, float)
    tang = _row_tangents(xs, values)
    j = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    h = (xs[j + 1] - xs[j])
    t = (x - xs[j]) / h
    cols = np.arange(len(x))
    hshape = h.reshape(h.shape + (1,) * (values.ndim - 2))
    tshape = t.reshape(t.shape + (1,) * (values.ndim - 2))
    return _hermite(values[j, cols], values[j + 1, cols],
                    tang[j, cols] * hshape, tang[j + 1, cols] * hshape, tshape)


def _interp_many(s, theta, tau1, side):
    """Vectorized spoke-field evaluation; returns (points, dirs, lengths).

    Skeletal points are bicubic in (theta, tau1).  Spoke tips are
    interpolated as a surface in (theta, w = asin tau1): the asin
    unfolds the square-root behavior of the spoke field at the fold, and
    the row stencil extends across the spine (onto the reflected column)
    and across the fold (onto the other side) so tangents see the tips
    continue smoothly around both.  Direction and length then come from
    tip minus skeletal point, which keeps interpolated tips riding the
    surface the grid tips sample.
    """
    g = s.grid
    theta = np.asarray(theta, float) % (2.0 * np.pi)
    tau1 = np.asarray(tau1, float)
    if np.any(tau1 < 0) or np.any(tau1 > 1):
        raise SRepError("tau1 out of [0, 1]")
    pos, dirs, logl, tips = s._grids()
    rows = np.asarray(g.tau1_rows)
    nrow = len(rows)
    h = 2.0 * np.pi / g.n_theta
    kf = theta / h
    kf_ref = ((np.pi - theta) % (2.0 * np.pi)) / h
    other = "S" if side == "N" else "N"

    # skeletal point: theta splines per natural-tau1 row, cubic across rows
    row_pts = np.stack([_cubic_periodic(pos[:, r], kf) for r in range(nrow)])
    point = _cubic_rows(rows, row_pts, tau1)

    # tips: extended rows in w; vein rows reflected below the spine and the
    # other side's rows beyond the fold
    w_rows = np.arcsin(rows)
    xs, vals = [], []
    for j in range(nrow - 2, 0, -1):
        xs.append(-w_rows[j])
        vals.append(_cubic_periodic(tips[side][:, j], kf_ref))
    for r in range(nrow):
        xs.append(w_rows[r])
        vals.append(_cubic_periodic(tips[side][:, r], kf))
    for j in range(nrow - 2, 0, -1):
        xs.append(np.pi - w_rows[j])
        vals.append(_cubic_periodic(tips[other][:, j], kf))
    tip = _cubic_rows(np.array(xs), np.stack(vals), np.arcsin(tau1))

    spoke = tip - point
    length = np.linalg.norm(spoke, axis=-1)
    if np.any(length < 1e-12 * s.scale()):
        raise SRepError("degenerate interpolated spoke (tip meets skeleton)")
    return point, spoke / length[..., None], length


def interpolate_spoke(s, theta, tau1, side):
    """Evaluate the spoke field at (theta, tau1) on one side.

    Returns (skeletal point, unit direction, length).  Grid nodes return
    the stored spoke bit-identically; between nodes see _interp_many for
    the scheme.  theta wraps cyclically; tau1 must lie in [0, 1]; side is
    "N" or "S" (at tau1 = 1 both sides share the fold spoke).
    """
    if side not in ("N", "S"):
        raise SRepError("side must be 'N' or 'S'")
    if not np.isfinite(theta) or not np.isfinite(tau1):
        raise SRepError("coordinates must be finite")
    if not 0.0 <= tau1 <= 1.0:
        raise SRepError("tau1 out of [0, 1]")
    g = s.grid
    theta = float(theta) % (2.0 * np.pi)
    pos, dirs, logl, _tips = s._grids()
    rows = np.asarray(g.tau1_rows)
    k_exact = int(round(theta / (2.0 * np.pi / g.n_theta))) % g.n_theta
    r_exact = min(int(np.searchsorted(rows, tau1)), len(rows) - 1)
    if theta == g.thetas[k_exact] and tau1 == rows[r_exact]:
        return (pos[k_exact, r_exact].copy(),
                dirs[side][k_exact, r_exact].copy(),
                float(np.exp(logl[side][k_exact, r_exact])))
    point, direction, length = _interp_many(
        s, np.array([theta]), np.array([tau1]), side)
    return point[0], direction[0], float(length[0])


def _normalize_many(theta, tau1, tau2):
    """Vectorized chart normalization (single reflection each way)."""
    theta = np.asarray(theta, float).copy()
    tau1 = np.asarray(tau1, float).copy()
    tau2 = np.asarray(tau2, float).copy()
    below = tau1 < 0
    theta[below] = np.pi - theta[below]
    tau1[below] = -tau1[below]
    above = tau1 > 1
    tau1[above] = 2.0 - tau1[above]
    tau2[above] = -tau2[above]
    if np.any(tau1 < 0) or np.any(tau1 > 1):
        raise SRepError("tau1 too far out of range to normalize")
    return theta % (2.0 * np.pi), tau1, tau2


def _onion_many(s, theta, tau1, tau2, side=None):
    """Vectorized onion-skin positions at raw (out-of-chart ok) coords.

    All queries must resolve to one side: pass scalar tau2 sign or a
    side flag for tau2 = 0.
    """
    theta, tau1, tau2 = _normalize_many(theta, tau1, tau2)
    out = np.empty(theta.shape + (3,))
    for eff in ("N", "S"):
        mask = (tau2 > 0) if eff == "N" else (tau2 < 0)
        if eff == (side or "N"):
            mask = mask | (tau2 == 0)
        if not np.any(mask):
            continue
        pt, d, ln = _interp_many(s, theta[mask], tau1[mask], eff)
        out[mask] = pt + (np.abs(tau2[mask]) * ln)[:, None] * d
    return out


def _onion(s, theta, tau1, tau2, side=None):
    """Onion-skin position at raw (possibly out-of-chart) coordinates."""
    return _onion_many(s, np.array([theta]), np.array([tau1]),
                       np.array([tau2]), side)[0]


def onion_point(s, coords):
    """Position on the |tau2| onion skin at the given object coordinates.

    tau2 = 0 returns the skeletal point; |tau2| = 1 the spoke tip.
    """
    return _onion(s, coords.theta, coords.tau1, coords.tau2, coords.side)


# ---------------------------------------------------------------------------
# fitted frames
# ---------------------------------------------------------------------------

def fitted_frames_many(s, theta, tau1, tau2, sides=None):
    """Orthonormal skin-adapted frames at many coordinates, as rows.

    Returns (n, 3, 3) matrices with rows (f1, f2, f3): f3 the outward
    skin normal, f1 the unit theta tangent projected orthogonal to f3,
    f2 = f3 x f1.  Tangents come from central differences of the onion
    map with step FD_STEP; where the chart degenerates (the tau1 = 0
    ends of the +-pi/2 columns reflect onto themselves) one-sided or
    row-offset probes of the same scale substitute.  Coordinates may be
    out-of-chart; they are normalized first.  sides ("N"/"S" per query,
    default "N") matters only where tau2 = 0: south skeletal frames are
    the north frames conjugated by a half turn about f1.
    """
    theta = np.asarray(theta, float)
    tau1 = np.asarray(tau1, float)
    tau2 = np.asarray(tau2, float)
    n = len(theta)
    d = FD_STEP
    tiny = 1e-12 * s.scale()

    t_th = (_onion_many(s, theta + d, tau1, tau2)
            - _onion_many(s, theta - d, tau1, tau2))
    idx = np.flatnonzero(np.linalg.norm(t_th, axis=-1) < tiny)
    if idx.size:
        # pole column: probe the theta tangent just off the degenerate row
        t_th[idx] = (_onion_many(s, theta[idx] + d, tau1[idx] + d, tau2[idx])
                     - _onion_many(s, theta[idx] - d, tau1[idx] + d, tau2[idx]))
    fwd = _onion_many(s, theta, tau1 + d, tau2)
    bwd = _onion_many(s, theta, tau1 - d, tau2)
    t_ta = fwd - bwd
    idx = np.flatnonzero(np.linalg.norm(t_ta, axis=-1) < tiny)
    if idx.size:
        mid = _onion_many(s, theta[idx], tau1[idx], tau2[idx])
        t_ta[idx] = fwd[idx] - mid
        sub = np.linalg.norm(t_ta[idx], axis=-1) < tiny
        t_ta[idx[sub]] = mid[sub] - bwd[idx[sub]]

    nrm = np.cross(t_th, t_ta)
    nn = np.linalg.norm(nrm, axis=-1)
    lim = 1e-8 * np.linalg.norm(t_th, axis=-1) * np.linalg.norm(t_ta, axis=-1)
    bad = (nn < lim) | (nn == 0.0)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SRepError("degenerate tangents: skin normal undefined at "
                        f"({theta[i]:.4f}, {tau1[i]:.4f}, {tau2[i]:.4f})")
    f3 = nrm / nn[:, None]

    # orient outward: along the local spoke, except at the skeletal fold
    # where the spoke lies in the sheet; there, match the near-fold sheet
    # normal for continuity
    th_n, ta_n, t2_n = _normalize_many(theta, tau1, tau2)
    ref = np.empty((n, 3))
    south = t2_n < 0
    for sd in ("N", "S"):
        m = south if sd == "S" else ~south
        if np.any(m):
            _, ref[m], _ = _interp_many(s, th_n[m], ta_n[m], sd)
    fold_skel = np.flatnonzero((t2_n == 0.0) & (ta_n == 1.0))
    if fold_skel.size:
        sub = fitted_frames_many(s, th_n[fold_skel],
                                 np.full(fold_skel.size, 0.95),
                                 np.zeros(fold_skel.size))
        ref[fold_skel] = sub[:, 2]
    align = np.sum(f3 * ref, axis=-1)
    if np.any(np.abs(align) < 1e-6):
        raise SRepError("cannot orient skin normal: reference ambiguous")
    f3[align < 0] *= -1.0

    f1 = t_th - np.sum(t_th * f3, axis=-1, keepdims=True) * f3
    n1 = np.linalg.norm(f1, axis=-1)
    if np.any(n1 < 1e-8 * np.linalg.norm(t_th, axis=-1)):
        raise SRepError("degenerate tangents: theta tangent parallel to normal")
    f1 = f1 / n1[:, None]
    mats = np.stack([f1, np.cross(f3, f1), f3], axis=1)
    if sides is not None:
        conj = (tau2 == 0.0) & (np.asarray(sides) == "S")
        mats[conj, 1:] *= -1.0
    return mats


def fitted_frame(s, coords):
    """Orthonormal frame adapted to the onion skin at coords.

    Single-point front end for fitted_frames_many; the side flag of
    coords selects the conjugated frame on the south side of the
    skeleton (tau2 = 0).
    """
    mats = fitted_frames_many(
        s, np.array([coords.theta]), np.array([coords.tau1]),
        np.array([coords.tau2]), np.array([coords.effective_side]))
    return Frame(mats[0])


# ---------------------------------------------------------------------------
# onion skins as meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OnionSkin:
    """One |tau2| level set sampled at all grid coordinates.

    points holds interior north points (grid id order), interior south
    points, then the shared fold-rim points; normals are the outward
    area-weighted vertex normals of the triangulated skin.
    """

    tau2: float
    n_interior: int
    points: np.ndarray
    normals: np.ndarray
    mesh: TriangleMesh

    def north_id(self, interior_id):
        return int(interior_id)

    def south_id(self, interior_id):
        return int(interior_id) + self.n_interior

    def rim_id(self, k):
        return 2 * self.n_interior + int(k)


def _skin_vertices(s, tau2):
    t = abs(float(tau2))
    interior = s.interior_points
    north = interior + t * s.north_len[:, None] * s.north_dir
    south = interior + t * s.south_len[:, None] * s.south_dir
    rim = s.fold_points + t * s.fold_len[:, None] * s.fold_dir
    return np.vstack([north, south, rim])


def _skin_faces(grid):
    """Closed triangulation of an onion skin on the grid lattice.

    Skin vertex ids: interior north points keep their grid ids, south
    points are offset by n_interior, and the shared fold rim starts at
    2 * n_interior.  The two sides carry opposite windings so the closed
    surface is consistently oriented.
    """
    g = grid
    ni = g.n_interior
    faces = []
    for k in range(g.n_theta):
        k2 = (k + 1) % g.n_theta
        ids_a = g.column_point_ids(k)
        ids_b = g.column_point_ids(k2)
        col_n_a = ids_a[:-1] + [2 * ni + k]
        col_n_b = ids_b[:-1] + [2 * ni + k2]
        col_s_a = [pid + ni for pid in ids_a[:-1]] + [2 * ni + k]
        col_s_b = [pid + ni for pid in ids_b[:-1]] + [2 * ni + k2]
        for r in range(len(ids_a) - 1):
            a, b = col_n_a[r], col_n_b[r]
            c, d = col_n_b[r + 1], col_n_a[r + 1]
            faces.append([a, b, c])
            faces.append([a, c, d])
            a, b = col_s_a[r], col_s_b[r]
            c, d = col_s_b[r + 1], col_s_a[r + 1]
            faces.append([b, a, d])
            faces.append([b, d, c])
    return np.asarray(faces, dtype=int)


def onion_skin(s, tau2):
    """Build the |tau2| onion skin as a closed triangle mesh.

    Requires 0 < |tau2| <= 1; the tau2 = 0 level degenerates onto the
    doubled skeletal sheet and has no embedded-surface form.
    """
    if not 0.0 < abs(tau2) <= 1.0:
        raise SRepError("onion skins exist for 0 < |tau2| <= 1")
    verts = _skin_vertices(s, tau2)
    mesh = TriangleMesh(verts, _skin_faces(s.grid))
    if mesh.enclosed_volume() < 0:
        mesh = TriangleMesh(verts, mesh.faces[:, ::-1])
    return OnionSkin(tau2=abs(float(tau2)), n_interior=s.grid.n_interior,
                     points=verts, normals=mesh.vertex_normals(), mesh=mesh)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def loop_min_gap(points):
    """Closest approach between non-adjacent segments of a closed polyline.

    A positive gap certifies the loop is simple; returns +inf for loops
    too short to have non-adjacent segment pairs.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 4:
        return np.inf
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    nxt = np.roll(np.arange(n), -1)
    d = segment_distances(pts[i], pts[nxt[i]], pts[j], pts[nxt[j]])
    return float(d.min())


def validate_srep(s, check_embedding=True):
    """Check structural invariants; raises SRepError on violation.

    Verifies the fold loop is a closed simple polygon, spoke lengths and
    directions are sane (already enforced at construction), and, when
    check_embedding is set, that the onion skins at the configured
    interior tau2 levels and the boundary are closed genus-0 meshes free
    of self-intersection (the spokes do not cross).
    """
    g = s.grid
    scale = s.scale()
    fold = s.fold_points
    n = g.n_theta
    seg = np.roll(fold, -1, axis=0) - fold
    if np.any(np.linalg.norm(seg, axis=1) < 1e-12 * scale):
        raise SRepError("fold loop has coincident consecutive points")
    if loop_min_gap(fold) < 1e-9 * scale:
        raise SRepError("fold loop self-intersects")
    if not check_embedding:
        return
    for tau2 in tuple(g.tau2_levels) + (1.0,):
        skin = onion_skin(s, tau2)
        try:
            skin.mesh.validate()
        except Exception as exc:
            raise SRepError(f"onion skin tau2={tau2}: {exc}") from exc
        bad = self_intersections(skin.mesh)
        if len(bad):
            raise SRepError(f"onion skin tau2={tau2} self-intersects "
                            f"({len(bad)} face pairs); spokes cross")


# ---------------------------------------------------------------------------
# analytic ellipsoid s-rep
# ---------------------------------------------------------------------------

def medial_disk_semi_axes(e):
    """Semi-axes (m_a, m_b) of the ellipsoid's medial disk.

    The Blum medial surface of an ellipsoid with semi-axes a > b > c is
    the elliptical disk x^2/m_a^2 + y^2/m_b^2 <= 1 in the (a, b) plane
    with m_a = (a^2 - c^2)/a and m_b = (b^2 - c^2)/b.
    """
    a, b, c = e.semi_axes
    return (a * a - c * c) / a, (b * b - c * c) / b


def _fold_ellipse_points(m_a, m_b, n):
    """n points uniform in arc length on the disk-boundary ellipse.

    Index 0 sits at (0, m_b); indices advance toward (+m_a, 0), reaching
    it at n/4 (the first skeletal vertex).
    """
    # parametrize p(phi) = (m_a sin phi, m_b cos phi); arc length via the
    # incomplete elliptic integral, inverted on a dense table plus Newton
    m = 1.0 - (m_b / m_a) ** 2
    phi_grid = np.linspace(0.0, 2.0 * np.pi, 1 << 15)
    s_grid = m_a * ellipeinc(phi_grid, m)
    total = s_grid[-1]
    targets = total * np.arange(n) / n
    phi = np.interp(targets, s_grid, phi_grid)
    for _ in range(3):
        f = m_a * ellipeinc(phi, m) - targets
        df = m_a * np.sqrt(1.0 - m * np.sin(phi) ** 2)
        phi = phi - f / df
    return np.column_stack([m_a * np.sin(phi), m_b * np.cos(phi)])


def _surface_from_skeletal(a, b, c, sx, sy, sign):
    """Invert the skeletal map: boundary point whose medial foot is (sx, sy)."""
    x = sx * a * a / (a * a - c * c)
    y = sy * b * b / (b * b - c * c)
    h = 1.0 - x * x / (a * a) - y * y / (b * b)
    if h < -1e-12:
        raise SRepError("skeletal point outside the medial disk")
    z = sign * c * np.sqrt(max(h, 0.0))
    return np.array([x, y, z])


def ellipsoid_srep(e, g=None):
    """The analytically known s-rep of a slabular ellipsoid.

    The skeletal sheet is the Blum medial disk; every spoke runs from its
    skeletal point to the surface and meets it orthogonally.  The fold is
    sampled uniformly in arc length with theta = 0 above the spine center
    and theta = +-pi/2 at the skeletal vertices; the spine spans the
    central 2/3 of the disk's long axis so that spine steps and the
    extension steps out to the vertex have equal length; veins run
    straight from spine foot to fold point.

    Raises SRepError when axis ratios a/b or b/c fall below 1.05 (the
    medial disk degenerates toward a point or segment).
    """
    if g is None:
        g = GridConfig()
    a, b, c = e.semi_axes
    if a / b < 1.05 or b / c < 1.05:
        raise SRepError("ellipsoid must be slabular: a/b and b/c >= 1.05")
    m_a, m_b = medial_disk_semi_axes(e)

    fold2d = _fold_ellipse_points(m_a, m_b, g.n_theta)
    x_end = 2.0 * m_a / 3.0
    spine_x = np.linspace(-x_end, x_end, g.n_spine)
    spine2d = np.column_stack([spine_x, np.zeros(g.n_spine)])
    # exact vertex columns: arc-length symmetry puts them at +-m_a but
    # pin them to kill table round-off
    q = g.n_theta // 4
    fold2d[q] = (m_a, 0.0)
    fold2d[3 * q] = (-m_a, 0.0)

    vein2d = np.empty((g.n_theta, g.n_vein_levels, 2))
    for k in range(g.n_theta):
        foot = spine2d[g.foot_of_column(k)]
        for j, lev in enumerate(g.tau1_levels):
            vein2d[k, j] = foot + lev * (fold2d[k] - foot)

    def lift(p2):
        return np.array([p2[0], p2[1], 0.0])

    interior2d = np.vstack([spine2d, vein2d.reshape(-1, 2)])
    north_dir = np.empty((g.n_interior, 3))
    north_len = np.empty(g.n_interior)
    south_dir = np.empty((g.n_interior, 3))
    south_len = np.empty(g.n_interior)
    for i, (sx, sy) in enumerate(interior2d):
        base = np.array([sx, sy, 0.0])
        for sign, dirs, lens in ((1.0, north_dir, north_len),
                                 (-1.0, south_dir, south_len)):
            tip = _surface_from_skeletal(a, b, c, sx, sy, sign)
            spoke = tip - base
            lens[i] = np.linalg.norm(spoke)
            if lens[i] <= 0:
                raise SRepError("degenerate spoke in ellipsoid s-rep")
            dirs[i] = spoke / lens[i]
    fold_dir = np.empty((g.n_theta, 3))
    fold_len = np.empty(g.n_theta)
    for k, (sx, sy) in enumerate(fold2d):
        base = np.array([sx, sy, 0.0])
        tip = _surface_from_skeletal(a, b, c, sx, sy, 0.0)
        spoke = tip - base
        fold_len[k] = np.linalg.norm(spoke)
        fold_dir[k] = spoke / fold_len[k]

    def to_world_pts(pts):
        return e.world_coords(pts)

    def to_world_dirs(d):
        return e.axes.to_world(d)

    return SRep(
        grid=g,
        spine_points=to_world_pts(np.column_stack(
            [spine2d, np.zeros(g.n_spine)])),
        vein_points=to_world_pts(np.column_stack(
            [vein2d.reshape(-1, 2), np.zeros(g.n_theta * g.n_vein_levels)])
        ).reshape(g.n_theta, g.n_vein_levels, 3),
        fold_points=to_world_pts(np.column_stack(
            [fold2d, np.zeros(g.n_theta)])),
        north_dir=to_world_dirs(north_dir), north_len=north_len,
        south_dir=to_world_dirs(south_dir), south_len=south_len,
        fold_dir=to_world_dirs(fold_dir), fold_len=fold_len,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def srep_to_dict(s):
    """Plain-data form of an s-rep (grid, points, spokes)."""
    g = s.grid
    theta = s.point_theta
    tau1 = s.point_tau1
    skeletal = []
    for pid in range(g.n_interior):
        skeletal.append({"theta": theta[pid], "tau1": tau1[pid],
                         "position": s.skeletal_points[pid].tolist()})
    fold = []
    for k in range(g.n_theta):
        pid = g.fold_id(k)
        fold.append({"theta": theta[pid],
                     "position": s.fold_points[k].tolist()})
    spokes = []
    for pid in range(g.n_interior):
        spokes.append({"point_index": pid, "side": "N",
                       "direction": s.north_dir[pid].tolist(),
                       "length": float(s.north_len[pid])})
        spokes.append({"point_index": pid, "side": "S",
                       "direction": s.south_dir[pid].tolist(),
                       "length": float(s.south_len[pid])})
    for k in range(g.n_theta):
        spokes.append({"point_index": k, "side": "fold",
                       "direction": s.fold_dir[k].tolist(),
                       "length": float(s.fold_len[k])})
    return {"schema_version": SCHEMA_VERSION,
            "grid_config": g.to_dict(),
            "skeletal_points": skeletal,
            "fold_points": fold,
            "spokes": spokes}


def srep_from_dict(d):
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SRepError(f"unsupported schema_version {d.get('schema_version')!r}")
    g = GridConfig.from_dict(d["grid_config"])
    skeletal = d["skeletal_points"]
    fold = d["fold_points"]
    spokes = d["spokes"]
    if len(skeletal) != g.n_interior or len(fold) != g.n_theta \
            or len(spokes) != g.n_spokes:
        raise SRepError("point/spoke counts do not match grid_config")
    interior = np.array([p["position"] for p in skeletal], float)
    spine = interior[:g.n_spine]
    veins = interior[g.n_spine:].reshape(g.n_theta, g.n_vein_levels, 3)
    fold_pts = np.array([p["position"] for p in fold], float)
    north_dir = np.empty((g.n_interior, 3))
    north_len = np.empty(g.n_interior)
    south_dir = np.empty((g.n_interior, 3))
    south_len = np.empty(g.n_interior)
    fold_dir = np.empty((g.n_theta, 3))
    fold_len = np.empty(g.n_theta)
    seen = {"N": np.zeros(g.n_interior, bool), "S": np.zeros(g.n_interior, bool),
            "fold": np.zeros(g.n_theta, bool)}
    for sp in spokes:
        side = sp["side"]
        idx = int(sp["point_index"])
        vec = np.asarray(sp["direction"], float)
        ln = float(sp["length"])
        if side == "N":
            north_dir[idx], north_len[idx] = vec, ln
        elif side == "S":
            south_dir[idx], south_len[idx] = vec, ln
        elif side == "fold":
            fold_dir[idx], fold_len[idx] = vec, ln
        else:
            raise SRepError(f"unknown spoke side {side!r}")
        if seen[side][idx]:
            raise SRepError(f"duplicate spoke ({side}, {idx})")
        seen[side][idx] = True
    if not all(arr.all() for arr in seen.values()):
        raise SRepError("missing spokes")
    return SRep(grid=g, spine_points=spine, vein_points=veins,
                fold_points=fold_pts,
                north_dir=north_dir, north_len=north_len,
                south_dir=south_dir, south_len=south_len,
                fold_dir=fold_dir, fold_len=fold_len)


def save_srep(s, path):
    """Write an s-rep as JSON with 17-significant-digit decimals."""
    with open(path, "w") as fh:
        fh.write(dump_json(srep_to_dict(s)))
        fh.write("\n")


def load_srep(path):
    with open(path) as fh:
        return srep_from_dict(json.load(fh))
