"""S-rep fitters: the single-warp method and the stage-wise method.

Both fitters start from the analytic ellipsoid s-rep at the end of the
flow and carry it back to the target object.  The single-warp fitter
maps it in one thin plate spline computed from the composed flow
correspondence and then refines.  The stage-wise (evolutionary) fitter
walks the retained flow stages one transition at a time: a landmark
geodesic shoot seeds the stage's s-rep, spoke refinement corrects it
against the stage surface, and a second shoot fitted with added radial
correspondences records the interior deformation of the transition.

The shared refinement optimizer is block coordinate descent over spoke
directions (on the sphere), spoke lengths (in log space), and skeletal
positions, with central finite-difference gradients, backtracking line
searches, and the s-rep non-crossing invariant re-checked on every
accepted step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cmcf import compose_to_stage
from .mesh import SurfaceProjector, TriangleMesh, _sat_touching
from .srep import SRep, SRepError, _skin_faces, loop_min_gap, validate_srep
from .warp import Diffeo, default_sigma, shoot_apply, shoot_fit, tps_fit, \
    transport_momenta

# landmark budget per stage transition: surface samples by area-weighted
# farthest-point sampling, crest samples by arc length, plus the two
# skeletal vertices
N_SURFACE_SAMPLES = 400
N_CREST_SAMPLES = 64

# radial correspondence levels added for the second per-stage shoot;
# tau2 = 0 (the shared skeletal points) is always included
RADIAL_TAU2 = (0.25, 0.5, 0.75, 1.0)


class FitError(ValueError):
    """Fitting failed: bad configuration, degenerate warp, or stage error."""


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefinementConfig:
    """Weights and stopping rule for spoke refinement.

    The regularizers anchor to the s-rep being refined: edge-length
    deviation and Laplacian smoothing both vanish at the input, so an
    s-rep already meeting the data terms is a fixed point.
    """

    w_fit: float = 10.0
    w_orth: float = 5.0
    w_len: float = 1.0
    w_reg: float = 1.0
    w_smooth: float = 0.5
    max_iters: int = 200
    rel_tol: float = 1e-6

    def __post_init__(self):
        w = (self.w_fit, self.w_orth, self.w_len, self.w_reg, self.w_smooth)
        if any(x < 0 for x in w):
            raise FitError("weights must be non-negative")
        if not any(x > 0 for x in w):
            raise FitError("at least one weight must be positive")
        if self.max_iters < 1:
            raise FitError("max_iters must be at least 1")
        if self.rel_tol < 0:
            raise FitError("rel_tol must be non-negative")


@dataclass(frozen=True)
class FitResult:
    """A fitted s-rep with fit-quality diagnostics.

    diagnostics always carries mean/max spoke-tip distance to the target
    surface (as a fraction of its bounding-box diagonal), mean/max
    spoke-to-normal angle in radians, spoke-pair length mismatch stats,
    and the refinement objective trace.  warp holds the recorded
    deformation when the fitter produces one (TPS for the single-warp
    fitter, the composed per-stage shoots for the evolutionary fitter).
    """

    srep: SRep
    diagnostics: dict
    warp: object = None
    stage_sreps: tuple = None


@dataclass(frozen=True)
class CrestTrack:
    """Fold-associated curve and skeletal vertices at one flow stage."""

    t: int
    crest: np.ndarray
    vertices: np.ndarray

    def __post_init__(self):
        crest = np.asarray(self.crest, float)
        verts = np.asarray(self.vertices, float)
        if crest.ndim != 2 or crest.shape[1] != 3 or len(crest) < 4:
            raise FitError("crest must be (n >= 4, 3)")
        if verts.shape != (2, 3):
            raise FitError("vertices must be (2, 3)")
        object.__setattr__(self, "crest", crest)
        object.__setattr__(self, "vertices", verts)


@dataclass(frozen=True)
class StagePair:
    """Corresponded boundary data for one stage transition t_hi -> t_lo."""

    t_hi: int
    t_lo: int
    src_surface: np.ndarray
    dst_surface: np.ndarray
    src_crest: np.ndarray
    dst_crest: np.ndarray
    src_vertices: np.ndarray
    dst_vertices: np.ndarray

    def __post_init__(self):
        if self.t_lo >= self.t_hi:
            raise FitError("transitions run backward (t_lo < t_hi)")
        for a, b in (("src_surface", "dst_surface"),
                     ("src_crest", "dst_crest"),
                     ("src_vertices", "dst_vertices")):
            pa = np.asarray(getattr(self, a), float)
            pb = np.asarray(getattr(self, b), float)
            if pa.shape != pb.shape:
                raise FitError(f"{a}/{b} counts differ")
            object.__setattr__(self, a, pa)
            object.__setattr__(self, b, pb)
        if self.src_vertices.shape != (2, 3):
            raise FitError("vertex pairs must be (2, 3)")

    def source_points(self):
        return np.vstack([self.src_surface, self.src_crest,
                          self.src_vertices])

    def target_points(self):
        return np.vstack([self.dst_surface, self.dst_crest,
                          self.dst_vertices])


# ---------------------------------------------------------------------------
# s-rep array plumbing
# ---------------------------------------------------------------------------

def _split_counts(grid):
    return grid.n_spine, grid.n_theta * grid.n_vein_levels, grid.n_theta


def _assemble_srep(grid, skel, dirs, lengths):
    """Build an SRep from stacked arrays.

    skel is (n_points, 3) in grid id order; dirs (n_spokes, 3) and
    lengths (n_spokes,) are ordered interior north, interior south,
    fold, matching boundary_points().
    """
    ns, nv, nf = _split_counts(grid)
    ni = grid.n_interior
    if np.any(lengths <= 0):
        raise FitError("spoke collapsed to non-positive length")
    return SRep(
        grid=grid,
        spine_points=skel[:ns],
        vein_points=skel[ns:ns + nv].reshape(grid.n_theta,
                                             grid.n_vein_levels, 3),
        fold_points=skel[ni:],
        north_dir=dirs[:ni], north_len=lengths[:ni],
        south_dir=dirs[ni:2 * ni], south_len=lengths[ni:2 * ni],
        fold_dir=dirs[2 * ni:], fold_len=lengths[2 * ni:],
    )


def _srep_from_points(grid, skel, tips):
    """S-rep with straight spokes re-formed from warped points."""
    ni = grid.n_interior
    carriers = np.concatenate([np.arange(ni), np.arange(ni),
                               ni + np.arange(grid.n_theta)])
    vec = tips - skel[carriers]
    lengths = np.linalg.norm(vec, axis=1)
    if np.any(lengths < 1e-12):
        raise FitError("warp collapsed a spoke")
    return _assemble_srep(grid, skel, vec / lengths[:, None], lengths)


def _warp_srep(s, apply_fn):
    """Map an s-rep through a point transform, spokes re-formed straight."""
    g = s.grid
    pts = np.vstack([s.skeletal_points, s.boundary_points()])
    out = np.asarray(apply_fn(pts), float)
    return _srep_from_points(g, out[:g.n_points], out[g.n_points:])


def radial_samples(s, taus=RADIAL_TAU2):
    """Interior correspondence samples along every spoke.

    Returns the skeletal points (tau2 = 0, shared between spoke pairs)
    followed by, for each tau2 level, the north, south, and fold spoke
    points at that fraction of the spoke length.  With the default
    levels and grid this is 85 + 4 * 146 points, and the same ordering
    on two s-reps of equal grid yields point-to-point correspondence.
    """
    g = s.grid
    skel = s.skeletal_points
    interior = s.interior_points
    blocks = [skel]
    for tau in taus:
        blocks.append(interior + tau * s.north_len[:, None] * s.north_dir)
        blocks.append(interior + tau * s.south_len[:, None] * s.south_dir)
        blocks.append(s.fold_points + tau * s.fold_len[:, None] * s.fold_dir)
    return np.vstack(blocks)


# ---------------------------------------------------------------------------
# skeletal grid graph
# ---------------------------------------------------------------------------

_graph_cache = {}


def _grid_graph(grid):
    """Edges and neighbor-averaging matrix of the skeletal grid.

    Edges: the spine chain, each theta column from its spine foot to its
    fold point, and the rings joining adjacent columns at each vein
    level and along the fold.
    """
    key = (grid.n_theta, grid.spine_steps, grid.tau1_levels)
    if key in _graph_cache:
        return _graph_cache[key]
    edges = set()
    for i in range(grid.n_spine - 1):
        edges.add((grid.spine_id(i), grid.spine_id(i + 1)))
    for k in range(grid.n_theta):
        ids = grid.column_point_ids(k)
        for a, b in zip(ids, ids[1:]):
            edges.add((min(a, b), max(a, b)))
        kn = (k + 1) % grid.n_theta
        for j in range(grid.n_vein_levels):
            a, b = grid.vein_id(k, j), grid.vein_id(kn, j)
            edges.add((min(a, b), max(a, b)))
        a, b = grid.fold_id(k), grid.fold_id(kn)
        edges.add((min(a, b), max(a, b)))
    E = np.array(sorted(edges), dtype=np.int64)
    n = grid.n_points
    avg = np.zeros((n, n))
    deg = np.zeros(n)
    for a, b in E:
        avg[a, b] += 1.0
        avg[b, a] += 1.0
        deg[a] += 1.0
        deg[b] += 1.0
    avg /= deg[:, None]
    _graph_cache[key] = (E, avg)
    return E, avg


_skin_cache = {}


def _skin_pair_data(grid):
    """Static onion-skin combinatorics shared by every s-rep on a grid.

    Returns the skin triangulation, the face pairs that share no vertex
    (the ones a self-intersection test must examine), and the unique
    skin edges (for the mean-edge-length scale).
    """
    key = (grid.n_theta, grid.spine_steps, grid.tau1_levels)
    if key in _skin_cache:
        return _skin_cache[key]
    faces = _skin_faces(grid)
    i, j = np.triu_indices(len(faces), k=1)
    shared = np.zeros(len(i), dtype=bool)
    for u in range(3):
        for v in range(3):
            shared |= faces[i, u] == faces[j, v]
    pairs = np.stack([i[~shared], j[~shared]], axis=1)
    e = np.vstack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    _skin_cache[key] = (faces, pairs, e)
    return _skin_cache[key]


class _EmbedChecker:
    """Non-crossing re-check for candidate refinement steps.

    Refinement never changes connectivity, so only the geometric
    invariants need re-testing after a step: the fold loop stays simple
    and every onion skin stays free of self-intersection.  This mirrors
    the geometry checks of validate_srep directly on the parameter
    arrays, with the skin combinatorics precomputed once per grid.
    """

    def __init__(self, grid, scale):
        self.faces, self.pairs, self.skin_edges = _skin_pair_data(grid)
        self.taus = tuple(grid.tau2_levels) + (1.0,)
        self.ni = grid.n_interior
        self.scale = scale
        # flat (face_i, face_j) index into the full F x F overlap matrix;
        # testing all boxes pairwise and gathering once beats per-pair
        # gathers at this face count
        self._flat = self.pairs[:, 0] * len(self.faces) + self.pairs[:, 1]

    def ok(self, p):
        fold = p.skel[self.ni:]
        seg = np.roll(fold, -1, axis=0) - fold
        if np.any(np.linalg.norm(seg, axis=1) < 1e-12 * self.scale):
            return False
        if loop_min_gap(fold) < 1e-9 * self.scale:
            return False
        offsets = np.exp(p.logl)[:, None] * p.dirs
        base = p.skel[p.carriers]
        for tau in self.taus:
            verts = base + tau * offsets
            ends = verts[self.skin_edges]
            scale = float(np.linalg.norm(ends[:, 0] - ends[:, 1],
                                         axis=1).mean())
            tri = verts[self.faces]
            lo = tri.min(axis=1)
            hi = tri.max(axis=1) + 1e-9 * scale
            near_mat = None
            for k in range(3):
                m = lo[:, k][:, None] <= hi[:, k][None, :]
                m = m & m.T
                near_mat = m if near_mat is None else near_mat & m
            near = near_mat.ravel()[self._flat]
            if not near.any():
                continue
            i = self.pairs[near, 0]
            j = self.pairs[near, 1]
            if _sat_touching(tri[i], tri[j], scale).any():
                return False
        return True


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

class _Params:
    """Mutable stacked view of the s-rep variables under refinement."""

    def __init__(self, s):
        self.grid = s.grid
        self.skel = np.array(s.skeletal_points)
        self.dirs = np.vstack([s.north_dir, s.south_dir, s.fold_dir])
        self.logl = np.log(np.concatenate([s.north_len, s.south_len,
                                           s.fold_len]))
        ni = s.grid.n_interior
        self.carriers = np.concatenate([np.arange(ni), np.arange(ni),
                                        ni + np.arange(s.grid.n_theta)])

    def copy(self):
        p = object.__new__(_Params)
        p.grid = self.grid
        p.skel = self.skel.copy()
        p.dirs = self.dirs.copy()
        p.logl = self.logl.copy()
        p.carriers = self.carriers
        return p

    def tips(self):
        return (self.skel[self.carriers]
                + np.exp(self.logl)[:, None] * self.dirs)

    def srep(self):
        return _assemble_srep(self.grid, self.skel, self.dirs,
                              np.exp(self.logl))


class _RefineProblem:
    """Objective terms for refine(), shared across blocks.

    Surface terms query the target through one projector; the edge and
    smoothness regularizers anchor to the input s-rep so they vanish at
    the start.
    """

    def __init__(self, s, target, cfg):
        self.cfg = cfg
        self.proj = SurfaceProjector(target)
        self.faces = target.faces
        self.vnormals = target.vertex_normals()
        self.scale = target.bbox_diagonal()
        self.edges, self.avg = _grid_graph(s.grid)
        self.skel0 = np.array(s.skeletal_points)
        self.len0 = np.linalg.norm(self.skel0[self.edges[:, 0]]
                                   - self.skel0[self.edges[:, 1]], axis=1)
        self.ni = s.grid.n_interior

    def normals_at(self, faces, bary):
        n = (self.vnormals[self.faces[faces]] * bary[:, :, None]).sum(axis=1)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def data_per_spoke(self, tips, dirs):
        """w_fit and w_orth terms for each spoke, as one vector."""
        near, fidx, bary = self.proj.project_bary(tips)
        d2 = ((tips - near) ** 2).sum(axis=1)
        cosang = np.clip((dirs * self.normals_at(fidx, bary)).sum(axis=1),
                         -1.0, 1.0)
        return self.cfg.w_fit * d2 + self.cfg.w_orth * (1.0 - cosang) ** 2

    def pair_terms(self, lengths):
        ni = self.ni
        return self.cfg.w_len * (lengths[:ni] - lengths[ni:2 * ni]) ** 2

    def edge_lengths(self, skel):
        return np.linalg.norm(skel[self.edges[:, 0]]
                              - skel[self.edges[:, 1]], axis=1)

    def reg_value(self, skel):
        dev = self.edge_lengths(skel) - self.len0
        return self.cfg.w_reg * float(dev @ dev) / len(self.len0)

    def smooth_displacement(self, skel):
        d = skel - self.skel0
        return d - self.avg @ d

    def smooth_value(self, skel):
        L = self.smooth_displacement(skel)
        return self.cfg.w_smooth * float(np.einsum("ij,ij->", L, L))

    def full(self, p):
        lengths = np.exp(p.logl)
        J = float(self.data_per_spoke(p.tips(), p.dirs).sum())
        J += float(self.pair_terms(lengths).sum())
        J += self.reg_value(p.skel)
        J += self.smooth_value(p.skel)
        return J


def _tangent_basis(dirs):
    """Per-row orthonormal tangent pairs for unit vectors."""
    helper = np.zeros_like(dirs)
    helper[np.arange(len(dirs)), np.argmin(np.abs(dirs), axis=1)] = 1.0
    t1 = np.cross(dirs, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(dirs, t1)
    return t1, t2


def _normalize_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _grad_directions(prob, p, h=1e-4):
    """Central differences along each spoke's tangent basis."""
    t1, t2 = _tangent_basis(p.dirs)
    skel = p.skel[p.carriers]
    lens = np.exp(p.logl)[:, None]
    g = np.zeros_like(p.dirs)
    for tan in (t1, t2):
        vals = []
        for sign in (1.0, -1.0):
            d = _normalize_rows(p.dirs + sign * h * tan)
            vals.append(prob.data_per_spoke(skel + lens * d, d))
        g += ((vals[0] - vals[1]) / (2 * h))[:, None] * tan
    return g


def _grad_lengths(prob, p, h=1e-4):
    """Central differences in log length, data plus pair terms."""
    skel = p.skel[p.carriers]
    ni = prob.ni
    base = np.exp(p.logl)
    vals = []
    for sign in (1.0, -1.0):
        lens = np.exp(p.logl + sign * h)
        f = prob.data_per_spoke(skel + lens[:, None] * p.dirs, p.dirs)
        # pair term per perturbed coordinate, the partner length fixed
        f[:ni] += prob.cfg.w_len * (lens[:ni] - base[ni:2 * ni]) ** 2
        f[ni:2 * ni] += prob.cfg.w_len * (base[:ni] - lens[ni:2 * ni]) ** 2
        vals.append(f)
    return (vals[0] - vals[1]) / (2 * h)


def _grad_skeletal(prob, p, h=None):
    """Central differences per skeletal point and axis.

    The data part perturbs all points jointly per axis (each spoke
    depends on its own carrier only); the edge term re-evaluates the
    touched edges; the quadratic smoothness term's central difference
    is exact and computed in closed form.
    """
    if h is None:
        h = 1e-5 * max(prob.scale, 1e-30)
    lens = np.exp(p.logl)[:, None]
    tips = p.skel[p.carriers] + lens * p.dirs
    n = len(p.skel)
    g = np.zeros((n, 3))
    eye = np.eye(3)
    for a in range(3):
        plus = prob.data_per_spoke(tips + h * eye[a], p.dirs)
        minus = prob.data_per_spoke(tips - h * eye[a], p.dirs)
        fd = (plus - minus) / (2 * h)
        np.add.at(g[:, a], p.carriers, fd)
    E = prob.edges
    w = prob.cfg.w_reg / len(prob.len0)
    ev = p.skel[E[:, 0]] - p.skel[E[:, 1]]
    for a in range(3):
        for end, sgn in ((0, 1.0), (1, -1.0)):
            lp = ev.copy()
            lp[:, a] += sgn * h
            lm = ev.copy()
            lm[:, a] -= sgn * h
            dp = (np.linalg.norm(lp, axis=1) - prob.len0) ** 2
            dm = (np.linalg.norm(lm, axis=1) - prob.len0) ** 2
            np.add.at(g[:, a], E[:, end], w * (dp - dm) / (2 * h))
    L = prob.smooth_displacement(p.skel)
    g += 2.0 * prob.cfg.w_smooth * (L - prob.avg.T @ L)
    return g


def _apply_block(p, block, delta):
    q = p.copy()
    if block == "dirs":
        q.dirs = _normalize_rows(p.dirs + delta)
    elif block == "logl":
        q.logl = p.logl + delta
    else:
        q.skel = p.skel + delta
    return q


_BLOCK_MOVE0 = {"dirs": 0.05, "logl": 0.05, "skel": 0.01}


def refine(s, target, cfg=None):
    """Refine an s-rep against a target surface.

    Block coordinate descent over spoke directions, log spoke lengths,
    and skeletal positions; each block takes a backtracking step along
    its negative finite-difference gradient, and a step is accepted only
    when the objective decreases and the s-rep invariants (including
    non-crossing onion skins) still hold.  Returns best-so-far with a
    ``non_crossing_blocked`` diagnostic when only invariant-violating
    steps remain.
    """
    cfg = cfg if cfg is not None else RefinementConfig()
    if not isinstance(target, TriangleMesh):
        raise FitError("target must be a TriangleMesh")
    validate_srep(s)
    prob = _RefineProblem(s, target, cfg)
    check = _EmbedChecker(s.grid, prob.scale)
    p = _Params(s)
    J = prob.full(p)
    trace = [J]
    grads = {"dirs": _grad_directions, "logl": _grad_lengths,
             "skel": _grad_skeletal}
    steps = {}
    blocked = False
    iters = 0
    for it in range(cfg.max_iters):
        iters = it + 1
        J_start = J
        moved = False
        crossing_rejected = False
        for block, grad_fn in grads.items():
            g = grad_fn(prob, p)
            gmax = float(np.abs(g).max())
            if gmax < 1e-14:
                continue
            if block == "logl":
                gnorm2 = float(g @ g)
            else:
                gnorm2 = float(np.einsum("ij,ij->", g, g))
            move0 = _BLOCK_MOVE0[block] * (prob.scale if block == "skel"
                                           else 1.0)
            step = steps.get(block, move0 / gmax)
            accepted = False
            for _ in range(25):
                q = _apply_block(p, block, -step * g)
                Jc = prob.full(q)
                if np.isfinite(Jc) and Jc <= J - 1e-4 * step * gnorm2:
                    if not check.ok(q):
                        crossing_rejected = True
                        step *= 0.5
                        continue
                    p, J = q, Jc
                    accepted = True
                    trace.append(J)
                    steps[block] = step * 1.3
                    break
                step *= 0.5
            moved |= accepted
        if not moved:
            blocked = crossing_rejected
            break
        if J_start - J <= cfg.rel_tol * max(abs(J_start), 1e-300):
            break
    out = p.srep()
    validate_srep(out)
    diagnostics = _spoke_metrics(out, prob)
    diagnostics["objective_trace"] = trace
    diagnostics["iterations"] = iters
    diagnostics["non_crossing_blocked"] = blocked
    return FitResult(srep=out, diagnostics=diagnostics)


def _spoke_metrics(s, prob):
    """Fit-quality summary of an s-rep against the problem's target."""
    tips = s.boundary_points()
    ni = s.grid.n_interior
    dirs = np.vstack([s.north_dir, s.south_dir, s.fold_dir])
    near, fidx, bary = prob.proj.project_bary(tips)
    dist = np.linalg.norm(tips - near, axis=1)
    cosang = np.clip((dirs * prob.normals_at(fidx, bary)).sum(axis=1),
                     -1.0, 1.0)
    ang = np.arccos(cosang)
    mismatch = np.abs(s.north_len - s.south_len)
    return {
        "tip_dist_mean_frac": float(dist.mean() / prob.scale),
        "tip_dist_max_frac": float(dist.max() / prob.scale),
        "orth_mean_rad": float(ang.mean()),
        "orth_max_rad": float(ang.max()),
        "len_mismatch_mean": float(mismatch.mean()),
        "len_mismatch_max": float(mismatch.max()),
    }


def spoke_metrics(s, target):
    """Public fit-quality summary of an s-rep against a target mesh."""
    return _spoke_metrics(s, _RefineProblem(s, target, RefinementConfig()))


# ---------------------------------------------------------------------------
# stage correspondence
# ---------------------------------------------------------------------------

def _stage_similarity(flow):
    """Per-stage (scale, offset) into the input frame.

    Flow stages are recentered and rescaled to unit area, so raw stage
    coordinates differ from the input's by a similarity.  Mapping every
    stage back to the input's area and centroid leaves the transitions
    carrying shape change only.
    """
    m0 = flow.stages[0].mesh
    area0 = m0.area()
    c0 = m0.centroid()
    frames = []
    for st in flow.stages:
        s = float(np.sqrt(area0 / st.mesh.area()))
        frames.append((s, c0 - s * st.mesh.centroid()))
    return frames


def _carry_back(flow, points):
    """Positions of material surface points at every flow stage.

    points lie on (or near) the final stage's surface; each hop anchors
    them barycentrically on the stage mesh, evaluates the stage's
    correspondence to its parent, and re-projects.  Returns a list
    indexed by stage, entry t being the (n, 3) positions at stage t,
    expressed in the input frame.
    """
    T = flow.T
    frames = _stage_similarity(flow)
    out = [None] * (T + 1)
    pos = SurfaceProjector(flow.stages[T].mesh).project(
        np.asarray(points, float))
    out[T] = frames[T][0] * pos + frames[T][1]
    for t in range(T, 0, -1):
        st = flow.stages[t]
        if np.any(st.corr_faces < 0):
            raise FitError(f"stage {t} has unanchored vertices")
        parent = flow.stages[t - 1].mesh
        anchors = st.anchor_positions(parent)
        _, fidx, bary = SurfaceProjector(st.mesh).project_bary(pos)
        img = np.einsum("ijk,ij->ik", anchors[st.mesh.faces[fidx]], bary)
        pos = SurfaceProjector(parent).project(img)
        out[t - 1] = frames[t - 1][0] * pos + frames[t - 1][1]
    return out


def _stage_surface(flow, t, frames):
    """Stage t's mesh expressed in the input frame."""
    if t == 0:
        return flow.input_mesh
    s, off = frames[t]
    m = flow.stages[t].mesh
    return TriangleMesh(s * m.vertices + off, m.faces)


def _rescale_srep(srep, s, offset):
    """The s-rep under the similarity x -> s x + offset."""
    if s == 1.0 and np.all(offset == 0.0):
        return srep
    return SRep(
        grid=srep.grid,
        spine_points=s * srep.spine_points + offset,
        vein_points=s * srep.vein_points + offset,
        fold_points=s * srep.fold_points + offset,
        north_dir=srep.north_dir, north_len=s * srep.north_len,
        south_dir=srep.south_dir, south_len=s * srep.south_len,
        fold_dir=srep.fold_dir, fold_len=s * srep.fold_len,
    )


def _ellipse_arclength_points(e, n):
    """Arc-length uniform samples of the ellipsoid's crest ellipse.

    The crest of an ellipsoid with a >= b >= c is its boundary in the
    (a, b) plane: the c = 0 section ellipse with semi-axes a and b.
    """
    a, b, _ = e.semi_axes
    t = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
    ring = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    seg = np.linalg.norm(np.diff(np.vstack([ring, ring[:1]]), axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = arc[-1] * np.arange(n) / n
    tt = np.interp(targets, arc, np.concatenate([t, [2.0 * np.pi]]))
    body = np.stack([a * np.cos(tt), b * np.sin(tt), np.zeros(n)], axis=1)
    return e.world_coords(body)


def track_crests(flow, e=None, n_samples=N_CREST_SAMPLES):
    """Carry the ellipsoid's crest and vertices back through the flow.

    The analytic crest ellipse (arc-length sampled) and the two +-a
    vertices of the fitted ellipsoid are treated as material points and
    walked down the stage correspondences.  Each stage's tracked crest
    must remain a closed simple loop.  Returns a list indexed by stage.
    """
    e = e if e is not None else flow.fitted
    crest = _ellipse_arclength_points(e, n_samples)
    a = e.semi_axes[0]
    verts = e.world_coords(np.array([[a, 0.0, 0.0], [-a, 0.0, 0.0]]))
    carried = _carry_back(flow, np.vstack([crest, verts]))
    tracks = []
    for t, pos in enumerate(carried):
        loop, vv = pos[:n_samples], pos[n_samples:]
        scale = float(np.linalg.norm(loop.max(axis=0) - loop.min(axis=0)))
        if loop_min_gap(loop) < 1e-9 * scale:
            raise FitError(f"tracked crest self-intersects at stage {t}")
        tracks.append(CrestTrack(t=t, crest=loop, vertices=vv))
    return tracks


def _fps_area_weighted(mesh, n):
    """Deterministic area-weighted farthest-point vertex sampling."""
    w = mesh.vertex_areas()
    verts = mesh.vertices
    if n >= len(verts):
        return verts.copy()
    idx = [int(np.argmax(w))]
    d2 = ((verts - verts[idx[0]]) ** 2).sum(axis=1)
    for _ in range(n - 1):
        i = int(np.argmax(w * d2))
        idx.append(i)
        d2 = np.minimum(d2, ((verts - verts[i]) ** 2).sum(axis=1))
    return verts[idx]


# ---------------------------------------------------------------------------
# fitters
# ---------------------------------------------------------------------------

def liu_fit(flow, e_srep, cfg=None):
    """Fit by one thin plate spline from the flow correspondence.

    The TPS maps the final stage's vertices to their t = 0 positions;
    the ellipsoid s-rep's skeletal points and spoke tips are pushed
    through it, spokes are re-formed straight, and the result is
    refined against the input surface.
    """
    cfg = cfg if cfg is not None else RefinementConfig()
    sT, offT = _stage_similarity(flow)[flow.T]
    src = sT * flow.stages[flow.T].mesh.vertices + offT
    dst = compose_to_stage(flow, flow.T, 0)
    warp = tps_fit(src, dst)
    s1 = _warp_srep(_rescale_srep(e_srep, sT, offT), warp.apply)
    initial = spoke_metrics(s1, flow.input_mesh)
    res = refine(s1, flow.input_mesh, cfg)
    diagnostics = dict(res.diagnostics)
    diagnostics["initial"] = initial
    return FitResult(srep=res.srep, diagnostics=diagnostics, warp=warp)


def evolutionary_fit(flow, e_srep, cfg=None, n_surface=N_SURFACE_SAMPLES,
                     n_crest=N_CREST_SAMPLES, warp1_iters=4, warp2_iters=1,
                     inner_max_iters=25, keep_stages=False):
    """Fit stage by stage along the retained flow stages.

    Each transition t -> t-1 (over the retained stage indices) runs:
    an initial geodesic shoot on the corresponded surface, crest, and
    vertex landmarks; application of that shoot to the stage-t s-rep
    with spokes re-formed straight; refinement against the stage t-1
    surface; and a second shoot re-fitted with radial correspondences
    at quarter-length spacing along every spoke (skeletal points are
    the tau2 = 0 correspondences, so skeletal vertices and fold points
    match each other).  The refined s-rep advances the pipeline; the
    second shoots compose into the recorded total deformation.

    Intermediate refinements only need to keep the s-rep tracking the
    slowly morphing stage surfaces, so they run under the tighter
    inner_max_iters budget; the final transition, against the actual
    input surface, uses the full cfg budget.
    """
    cfg = cfg if cfg is not None else RefinementConfig()
    if flow.T < 1:
        raise FitError("flow has no transitions")
    retained = sorted(set(int(t) for t in flow.retained_indices))
    if retained[0] != 0 or retained[-1] != flow.T:
        raise FitError("retained stages must span 0 .. T")
    frames = _stage_similarity(flow)
    tracks = track_crests(flow, flow.fitted, n_samples=n_crest)
    surf = _carry_back(flow, _fps_area_weighted(flow.stages[flow.T].mesh,
                                                n_surface))
    cur = _rescale_srep(e_srep, *frames[flow.T])
    warps = []
    stage_sreps = [(flow.T, cur)]
    per_stage = []
    walk = list(reversed(retained))
    for hi, lo in zip(walk, walk[1:]):
        pair = StagePair(
            t_hi=hi, t_lo=lo,
            src_surface=surf[hi], dst_surface=surf[lo],
            src_crest=tracks[hi].crest, dst_crest=tracks[lo].crest,
            src_vertices=tracks[hi].vertices, dst_vertices=tracks[lo].vertices)
        src = pair.source_points()
        dst = pair.target_points()
        sigma = default_sigma(src)
        warp1, info1 = shoot_fit(src, dst, sigma, n_iters=warp1_iters)
        s1 = _warp_srep(cur, lambda pts: shoot_apply(warp1, pts))
        target = _stage_surface(flow, lo, frames)
        stage_cfg = cfg
        if lo != 0 and inner_max_iters is not None:
            stage_cfg = replace(cfg, max_iters=min(cfg.max_iters,
                                                   inner_max_iters))
        try:
            res = refine(s1, target, stage_cfg)
        except (FitError, SRepError) as exc:
            raise FitError(f"refine failed at stage {hi} -> {lo}: {exc}") \
                from exc
        src_all = np.vstack([src, radial_samples(cur)])
        dst_all = np.vstack([dst, radial_samples(res.srep)])
        p0 = transport_momenta(warp1, src_all)
        warp2, info2 = shoot_fit(src_all, dst_all, sigma,
                                 n_iters=warp2_iters, p0=p0)
        warps.append(warp2)
        cur = res.srep
        per_stage.append({
            "t_hi": hi, "t_lo": lo,
            "warp1_rms": float(info1["endpoint_rms"]),
            "warp2_rms": float(info2["endpoint_rms"]),
            "refine_iterations": res.diagnostics["iterations"],
            "objective_final": res.diagnostics["objective_trace"][-1],
        })
        stage_sreps.append((lo, cur))
    diagnostics = spoke_metrics(cur, flow.input_mesh)
    diagnostics["objective_trace"] = [st["objective_final"]
                                      for st in per_stage]
    diagnostics["stages"] = per_stage
    return FitResult(srep=cur, diagnostics=diagnostics,
                     warp=Diffeo(tuple(warps)),
                     stage_sreps=tuple(stage_sreps) if keep_stages else None)
