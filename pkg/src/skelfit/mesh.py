"""Triangle meshes: containers, file I/O, validation, and curvature.

Meshes are vertex/face index arrays.  Validation enforces the input
contract used across the package: closed, oriented, manifold, genus
zero, no degenerate faces.  Curvature estimation fits a quadric graph
over each vertex's two-ring; crest and vertex detection build on it.

Sign convention: principal curvatures are positive on convex regions,
so a sphere of radius r carries kappa1 = kappa2 = 1/r when faces are
oriented outward.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    """Raised when a mesh violates the input contract."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (m, 3)")

    # -- basic quantities -------------------------------------------------

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.faces.copy())

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_normals(self, normalised=True):
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        if normalised:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            ln[ln == 0] = 1.0
            n = n / ln
        return n

    def face_areas(self):
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self):
        return float(self.face_areas().sum())

    def vertex_areas(self):
        """Barycentric vertex areas (one third of incident face areas)."""
        fa = self.face_areas() / 3.0
        va = np.zeros(self.n_vertices)
        np.add.at(va, self.faces.ravel(), np.repeat(fa, 3))
        return va

    def vertex_normals(self):
        """Area-weighted vertex normals, unit length."""
        fn = self.face_normals(normalised=False)
        vn = np.zeros_like(self.vertices)
        np.add.at(vn, self.faces.ravel(), np.repeat(fn, 3, axis=0))
        ln = np.linalg.norm(vn, axis=1, keepdims=True)
        ln[ln == 0] = 1.0
        return vn / ln

    def centroid(self):
        """Area-weighted centroid of the surface."""
        a, b, c = self.face_corners()
        fa = self.face_areas()
        return (fa[:, None] * (a + b + c) / 3.0).sum(axis=0) / fa.sum()

    def bbox_diagonal(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def enclosed_volume(self):
        """Signed volume by divergence theorem; positive when outward."""
        a, b, c = self.face_corners()
        return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)

    # -- connectivity ------------------------------------------------------

    def edges(self):
        """Unique undirected edges as sorted index pairs, lexicographic."""
        if "edges" not in self._cache:
            e = np.concatenate([self.faces[:, [0, 1]],
                                self.faces[:, [1, 2]],
                                self.faces[:, [2, 0]]])
            e = np.sort(e, axis=1)
            e = np.unique(e, axis=0)
            self._cache["edges"] = e
        return self._cache["edges"]

    def edge_faces(self):
        """For each edge of self.edges(), the (up to 2) incident faces."""
        if "edge_faces" not in self._cache:
            edges = self.edges()
            key = edges[:, 0] * self.n_vertices + edges[:, 1]
            order = np.argsort(key, kind="stable")
            lut = np.empty(len(key), dtype=np.int64)
            lut[order] = np.arange(len(key))
            he = np.concatenate([self.faces[:, [0, 1]],
                                 self.faces[:, [1, 2]],
                                 self.faces[:, [2, 0]]])
            hf = np.tile(np.arange(self.n_faces), 3)
            hk = np.sort(he, axis=1)
            hk = hk[:, 0] * self.n_vertices + hk[:, 1]
            idx = np.searchsorted(key[order], hk)
            eidx = order[idx]
            ef = np.full((len(edges), 2), -1, dtype=np.int64)
            first = np.full(len(edges), True)
            for e, f in zip(eidx, hf):
                if first[e]:
                    ef[e, 0] = f
                    first[e] = False
                else:
                    ef[e, 1] = f
            self._cache["edge_faces"] = ef
        return self._cache["edge_faces"]

    def vertex_neighbors(self):
        """List of neighbor index arrays, one per vertex."""
        if "vneigh" not in self._cache:
            e = self.edges()
            both = np.concatenate([e, e[:, ::-1]])
            order = np.argsort(both[:, 0], kind="stable")
            src = both[order, 0]
            dst = both[order, 1]
            counts = np.bincount(src, minlength=self.n_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._cache["vneigh"] = [dst[offsets[i]:offsets[i + 1]]
                                     for i in range(self.n_vertices)]
        return self._cache["vneigh"]

    # -- validation --------------------------------------------------------

    def validate(self, require_genus_zero=True):
        """Check the closed-oriented-manifold contract; raise MeshError."""
        if self.n_faces == 0 or self.n_vertices == 0:
            raise MeshError("empty mesh")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise MeshError("face index out of range")
        if len(np.unique(self.faces.ravel())) != self.n_vertices:
            raise MeshError("mesh has unreferenced vertices")
        fa = self.face_areas()
        if np.any(fa < 1e-12 * max(fa.mean(), 1e-300)):
            raise MeshError("degenerate (near zero area) faces present")
        he = np.concatenate([self.faces[:, [0, 1]],
                             self.faces[:, [1, 2]],
                             self.faces[:, [2, 0]]])
        key = he[:, 0] * self.n_vertices + he[:, 1]
        if len(np.unique(key)) != len(key):
            raise MeshError("mesh is not consistently oriented "
                            "(repeated directed edge)")
        und = np.sort(he, axis=1)
        ukey = und[:, 0] * self.n_vertices + und[:, 1]
        _, counts = np.unique(ukey, return_counts=True)
        if np.any(counts != 2):
            raise MeshError("mesh is not a closed manifold "
                            "(edge not shared by exactly two faces)")
        if require_genus_zero:
            V = self.n_vertices
            E = len(counts)
            F = self.n_faces
            if V - E + F != 2:
                raise MeshError(
                    f"mesh is not genus zero (Euler characteristic {V - E + F})")
        if self.enclosed_volume() <= 0:
            raise MeshError("faces are oriented inward")
        return self


# -- file I/O ---------------------------------------------------------------

def load_mesh(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return _load_obj(path)
    if ext == ".off":
        return _load_off(path)
    if ext == ".ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format: {ext!r}")


def save_mesh(mesh, path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        _save_obj(mesh, path)
    elif ext == ".off":
        _save_off(mesh, path)
    elif ext == ".ply":
        _save_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format: {ext!r}")


def _load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) != 3:
                    raise MeshError("only triangle faces are supported")
                faces.append(idx)
    return TriangleMesh(np.array(verts), np.array(faces))


def _save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def _load_off(path):
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#")[0]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshError("missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise MeshError("only triangle faces are supported")
        faces.append([int(t) for t in tokens[pos + 1:pos + 4]])
        pos += 1 + k
    return TriangleMesh(verts, np.array(faces))


def _save_off(mesh, path):
    with open(path, "w") as fh:
        fh.write("OFF\n%d %d 0\n" % (mesh.n_vertices, mesh.n_faces))
        for v in mesh.vertices:
            fh.write("%.17g %.17g %.17g\n" % tuple(v))
        for f in mesh.faces:
            fh.write("3 %d %d %d\n" % tuple(f))


def _load_ply(path):
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline().decode("ascii").strip()
            header.append(line)
            if line == "end_header":
                break
        if "format ascii 1.0" not in header:
            raise MeshError("only ascii PLY is supported")
        nv = nf = 0
        for line in header:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                nv = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                nf = int(parts[2])
        body = fh.read().decode("ascii").split("\n")
    verts = np.array([body[i].split()[:3] for i in range(nv)], dtype=float)
    faces = []
    for i in range(nv, nv + nf):
        parts = body[i].split()
        if int(parts[0]) != 3:
            raise MeshError("only triangle faces are supported")
        faces.append([int(p) for p in parts[1:4]])
    return TriangleMesh(verts, np.array(faces))


def _save_ply(mesh, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write("element vertex %d\n" % mesh.n_vertices)
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("element face %d\n" % mesh.n_faces)
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write("%.17g %.17g %.17g\n" % tuple(v))
        for f in mesh.faces:
            fh.write("3 %d %d %d\n" % tuple(f))


# -- primitive meshes --------------------------------------------------------

def icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron, vertices projected to the sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts, faces = _subdivide_once(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriangleMesh(verts * radius, faces)


def _subdivide_once(verts, faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    ue, inv = np.unique(e, axis=0, return_inverse=True)
    mid = 0.5 * (verts[ue[:, 0]] + verts[ue[:, 1]])
    mid_idx = len(verts) + np.arange(len(ue))
    m01 = mid_idx[inv[:len(faces)]]
    m12 = mid_idx[inv[len(faces):2 * len(faces)]]
    m20 = mid_idx[inv[2 * len(faces):]]
    f = faces
    new_faces = np.concatenate([
        np.stack([f[:, 0], m01, m20], axis=1),
        np.stack([f[:, 1], m12, m01], axis=1),
        np.stack([f[:, 2], m20, m12], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])
    return np.concatenate([verts, mid]), new_faces


# -- curvature ----------------------------------------------------------------

@dataclass
class CurvatureField:
    """Per-vertex principal curvatures and directions.

    kappa1 >= kappa2; dir1/dir2 are unit tangent vectors, orthogonal to
    each other and to the vertex normal.  gaussian = kappa1 * kappa2.
    """

    kappa1: np.ndarray
    kappa2: np.ndarray
    dir1: np.ndarray
    dir2: np.ndarray
    normals: np.ndarray

    @property
    def gaussian(self):
        return self.kappa1 * self.kappa2

    @property
    def mean(self):
        return 0.5 * (self.kappa1 + self.kappa2)


def _rings(mesh, depth=2):
    neigh = mesh.vertex_neighbors()
    out = []
    for i in range(mesh.n_vertices):
        ring = set(neigh[i])
        frontier = ring
        for _ in range(depth - 1):
            nxt = set()
            for j in frontier:
                nxt.update(neigh[j])
            frontier = nxt - ring - {i}
            ring |= frontier
        ring.discard(i)
        out.append(np.fromiter(sorted(ring), dtype=np.int64))
    return out


def estimate_curvatures(mesh: TriangleMesh) -> CurvatureField:
    """Principal curvatures by quadric graph fits over two-rings.

    Each two-ring is expressed in a tangent frame at the vertex and a
    full quadric z = a x^2 + b xy + c y^2 + d x + e y is fitted; the
    shape operator of the graph at the origin gives the curvatures.
    The sign is flipped so convex regions are positive.
    """
    normals = mesh.vertex_normals()
    rings = _rings(mesh, depth=2)
    n = mesh.n_vertices
    kappa1 = np.empty(n)
    kappa2 = np.empty(n)
    dir1 = np.empty((n, 3))
    dir2 = np.empty((n, 3))
    V = mesh.vertices
    for i in range(n):
        nb = rings[i]
        if len(nb) < 5:
            nb = np.unique(np.concatenate([nb] + [rings[j] for j in nb]))
            nb = nb[nb != i]
        nrm = normals[i]
        t1 = np.cross(nrm, [1.0, 0.0, 0.0])
        if np.linalg.norm(t1) < 1e-6:
            t1 = np.cross(nrm, [0.0, 1.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nrm, t1)
        d = V[nb] - V[i]
        x = d @ t1
        y = d @ t2
        z = d @ nrm
        A = np.stack([x * x, x * y, y * y, x, y], axis=1)
        coef, *_ = np.linalg.lstsq(A, z, rcond=None)
        a, b, c, dd, ee = coef
        # Weingarten map of the graph at the origin (first fundamental
        # form from the fitted gradient, second from the quadric terms)
        w = np.sqrt(1.0 + dd * dd + ee * ee)
        E = 1.0 + dd * dd
        Fm = dd * ee
        G = 1.0 + ee * ee
        L = 2.0 * a / w
        M = b / w
        N = 2.0 * c / w
        det = E * G - Fm * Fm
        S = np.array([[L * G - M * Fm, M * E - L * Fm],
                      [M * G - N * Fm, N * E - M * Fm]]) / det
        Ssym = 0.5 * (S + S.T)
        evals, evecs = np.linalg.eigh(Ssym)
        # graph grows along the outward normal, so convexity means
        # negative quadric terms; flip to the positive-convex convention
        k = -evals[::-1]
        vecs = evecs[:, ::-1]
        hi = 0 if k[0] >= k[1] else 1
        lo = 1 - hi
        kappa1[i] = k[hi]
        kappa2[i] = k[lo]
        base = np.stack([t1, t2])
        d1w = vecs[:, hi] @ base
        d2w = vecs[:, lo] @ base
        dir1[i] = d1w / np.linalg.norm(d1w)
        dir2[i] = d2w / np.linalg.norm(d2w)
    return CurvatureField(kappa1, kappa2, dir1, dir2, normals)


# -- surface landmarks: vertices and crest -----------------------------------

def detect_vertices(mesh, curv=None, comparable_ratio=0.5):
    """Find the two convexity vertices (local maxima of Gaussian curvature).

    Candidate vertices are strict one-ring maxima of K on convex
    regions (both curvatures positive); each is refined by a local
    quadratic fit of K over the one-ring.  Candidates closer than a
    quarter of the bounding-box diagonal to a stronger one are
    suppressed.  Raises MeshError when fewer than two remain or when a
    third candidate is within ``comparable_ratio`` of the second
    (ambiguous, e.g. sphere-like inputs).

    Returns (positions (2, 3), vertex_indices (2,)).
    """
    if curv is None:
        curv = estimate_curvatures(mesh)
    K = curv.gaussian
    neigh = mesh.vertex_neighbors()
    convex = (curv.kappa1 > 0) & (curv.kappa2 > 0)
    cand = [i for i in range(mesh.n_vertices)
            if convex[i] and np.all(K[i] > K[neigh[i]])]
    if len(cand) < 2:
        raise MeshError("fewer than two vertex candidates found")
    refined = []
    V = mesh.vertices
    for i in cand:
        nb = neigh[i]
        nrm = curv.normals[i]
        t1 = curv.dir1[i]
        t2 = curv.dir2[i]
        d = V[nb] - V[i]
        x = np.concatenate([[0.0], d @ t1])
        y = np.concatenate([[0.0], d @ t2])
        z = np.concatenate([[K[i]], K[nb]])
        A = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=1)
        coef, *_ = np.linalg.lstsq(A, z, rcond=None)
        a, b, c, dd, ee, ff = coef
        H = np.array([[2 * a, b], [b, 2 * c]])
        try:
            offset = np.linalg.solve(H, [-dd, -ee])
        except np.linalg.LinAlgError:
            offset = np.zeros(2)
        r_max = np.sqrt((d * d).sum(axis=1)).max()
        if np.linalg.norm(offset) > r_max or np.any(np.linalg.eigvalsh(H) >= 0):
            offset = np.zeros(2)
        peak = (a * offset[0] ** 2 + b * offset[0] * offset[1]
                + c * offset[1] ** 2 + dd * offset[0] + ee * offset[1] + ff)
        pos = V[i] + offset[0] * t1 + offset[1] * t2
        refined.append((max(peak, K[i]), pos, i))
    refined.sort(key=lambda t: -t[0])
    sep = mesh.bbox_diagonal() / 4.0
    kept = []
    for strength, pos, i in refined:
        if all(np.linalg.norm(pos - p) > sep for _, p, _ in kept):
            kept.append((strength, pos, i))
    if len(kept) < 2:
        raise MeshError("fewer than two separated vertex candidates")
    if len(kept) > 2 and kept[2][0] >= comparable_ratio * kept[1][0]:
        raise MeshError("ambiguous vertex detection: more than two "
                        "candidates of comparable strength")
    positions = np.stack([kept[0][1], kept[1][1]])
    indices = np.array([kept[0][2], kept[1][2]], dtype=np.int64)
    return positions, indices


@dataclass
class CrestCurve:
    """Closed crest loop resampled to a fixed number of points.

    ``points`` is (n, 3) ordered along the loop; ``vertex_slots`` holds
    the sample indices nearest the two detected convexity vertices, so
    the loop splits into two arcs between them.
    """

    points: np.ndarray
    vertex_slots: np.ndarray
    total_length: float


def detect_crest(mesh, curv=None, n_samples=256):
    """Trace the crest: zero crossings of the kappa1 extremality.

    The extremality e = grad(kappa1) . dir1 is evaluated per vertex
    with a one-ring linear fit; sign-consistent zero crossings on
    edges whose endpoints are crest-like (kappa1 > |kappa2|) are linked
    through triangles into loops, and the longest closed loop is
    resampled uniformly by arclength.
    """
    if curv is None:
        curv = estimate_curvatures(mesh)
    verts_pos, _ = detect_vertices(mesh, curv)
    neigh = mesh.vertex_neighbors()
    V = mesh.vertices
    n = mesh.n_vertices
    grad = np.zeros((n, 2))
    for i in range(n):
        nb = neigh[i]
        t1 = curv.dir1[i]
        t2 = curv.dir2[i]
        d = V[nb] - V[i]
        A = np.stack([d @ t1, d @ t2, np.ones(len(nb))], axis=1)
        coef, *_ = np.linalg.lstsq(A, curv.kappa1[nb] - curv.kappa1[i],
                                   rcond=None)
        grad[i] = coef[:2]
    # extremality in each vertex's own principal direction: grad is in
    # (dir1, dir2) coordinates, so e is simply the first component
    e = grad[:, 0]

    crestlike = curv.kappa1 > np.abs(curv.kappa2)
    edges = mesh.edges()
    ef = mesh.edge_faces()
    i0, i1 = edges[:, 0], edges[:, 1]
    flip = np.einsum("ij,ij->i", curv.dir1[i0], curv.dir1[i1]) < 0
    e1 = np.where(flip, -e[i1], e[i1])
    cross = (e[i0] * e1 < 0) & crestlike[i0] & crestlike[i1]
    cross_idx = np.nonzero(cross)[0]
    if len(cross_idx) < 3:
        raise MeshError("no crest zero crossings found")
    t = e[i0[cross_idx]] / (e[i0[cross_idx]] - e1[cross_idx])
    pts = (1 - t)[:, None] * V[i0[cross_idx]] + t[:, None] * V[i1[cross_idx]]
    slot = {int(ei): k for k, ei in enumerate(cross_idx)}

    # link crossings through faces containing exactly two crossing edges
    face_hits = {}
    for k, ei in enumerate(cross_idx):
        for f in ef[ei]:
            face_hits.setdefault(int(f), []).append(k)
    links = {k: [] for k in range(len(cross_idx))}
    for f, ks in face_hits.items():
        if len(ks) == 2:
            links[ks[0]].append(ks[1])
            links[ks[1]].append(ks[0])
    # walk loops
    visited = np.zeros(len(cross_idx), dtype=bool)
    loops = []
    for start in range(len(cross_idx)):
        if visited[start] or len(links[start]) != 2:
            continue
        loop = [start]
        visited[start] = True
        prev, cur = start, links[start][0]
        closed = False
        while True:
            if visited[cur]:
                closed = cur == start
                break
            loop.append(cur)
            visited[cur] = True
            nxt = [k for k in links[cur] if k != prev]
            if len(nxt) != 1:
                break
            prev, cur = cur, nxt[0]
        if closed and len(loop) >= 3:
            loops.append(loop)
    if not loops:
        raise MeshError("crest zero crossings do not form a closed loop")
    lengths = []
    for loop in loops:
        p = pts[loop]
        lengths.append(np.linalg.norm(np.roll(p, -1, axis=0) - p,
                                      axis=1).sum())
    loop = loops[int(np.argmax(lengths))]
    p = pts[loop]

    # uniform arclength resampling of the closed polyline
    seg = np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    p_closed = np.vstack([p, p[:1]])
    s = np.arange(n_samples) * total / n_samples
    out = np.stack([np.interp(s, cum, p_closed[:, k]) for k in range(3)],
                   axis=1)

    # anchor the parametrisation at the sample nearest the stronger
    # convexity vertex
    d0 = np.linalg.norm(out - verts_pos[0], axis=1)
    start = int(np.argmin(d0))
    out = np.roll(out, -start, axis=0)
    d1 = np.linalg.norm(out - verts_pos[1], axis=1)
    second = int(np.argmin(d1))
    # orient so the second vertex sits in the first half of the loop
    if second > n_samples - second:
        out = np.vstack([out[:1], out[:0:-1]])
        second = n_samples - second
    return CrestCurve(points=out,
                      vertex_slots=np.array([0, second], dtype=np.int64),
                      total_length=float(total))


# -- closest point on surface -------------------------------------------------

class SurfaceProjector:
    """Closest-point queries against a triangle mesh.

    Candidate faces come from a centroid KD-tree; exact point-triangle
    distances are evaluated on the candidates.  k is chosen so the true
    nearest face is essentially never missed on the remeshed surfaces
    used here.
    """

    def __init__(self, mesh: TriangleMesh, k=12):
        self.mesh = mesh
        a, b, c = mesh.face_corners()
        self._a = a
        self._ab = b - a
        self._ac = c - a
        self._tree = cKDTree((a + b + c) / 3.0)
        self.k = min(k, mesh.n_faces)

    def project(self, points, return_faces=False):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        _, cand = self._tree.query(points, k=self.k)
        if self.k == 1:
            cand = cand[:, None]
        flat = cand.ravel()
        p_rep = np.repeat(points, self.k, axis=0)
        close = _closest_point_on_triangles(
            p_rep, self._a[flat], self._ab[flat], self._ac[flat])
        d2 = ((close - p_rep) ** 2).sum(axis=1).reshape(len(points), self.k)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(points))
        out = close.reshape(len(points), self.k, 3)[rows, best]
        if return_faces:
            return out, cand[rows, best]
        return out

    def project_bary(self, points):
        """Closest points with (face index, barycentric coords) anchors."""
        out, faces = self.project(points, return_faces=True)
        ab = self._ab[faces]
        ac = self._ac[faces]
        d = out - self._a[faces]
        g11 = np.einsum("ij,ij->i", ab, ab)
        g12 = np.einsum("ij,ij->i", ab, ac)
        g22 = np.einsum("ij,ij->i", ac, ac)
        r1 = np.einsum("ij,ij->i", d, ab)
        r2 = np.einsum("ij,ij->i", d, ac)
        det = g11 * g22 - g12 * g12
        u = (g22 * r1 - g12 * r2) / det
        v = (g11 * r2 - g12 * r1) / det
        bary = np.stack([1.0 - u - v, u, v], axis=1)
        bary = np.clip(bary, 0.0, 1.0)
        bary /= bary.sum(axis=1, keepdims=True)
        return out, faces, bary


def _closest_point_on_triangles(p, a, ab, ac):
    """Vectorised closest point on triangle (Ericson, Real-Time CD)."""
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - (a + ab)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - (a + ac)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)
    out[m] = a[m] + ab[m]
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)
    out[m] = a[m] + ac[m]
    done |= m
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = d1 / (d1 - d3)
    out[m] = a[m] + v[m, None] * ab[m]
    done |= m
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = d2 / (d2 - d6)
    out[m] = a[m] + w[m, None] * ac[m]
    done |= m
    m = ~done & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out[m] = (a[m] + ab[m]) + w[m, None] * (ac[m] - ab[m])
    done |= m
    m = ~done
    denom = va + vb + vc
    with np.errstate(invalid="ignore", divide="ignore"):
        v = vb / denom
        w = vc / denom
    out[m] = a[m] + v[m, None] * ab[m] + w[m, None] * ac[m]
    return out


def segment_distances(p1, q1, p2, q2):
    """Minimum distances between 3D segment pairs, vectorised.

    All arguments are (m, 3); pair i is segment (p1[i], q1[i]) against
    (p2[i], q2[i]).  Clamped closest-parameter recipe from Ericson,
    Real-Time Collision Detection; degenerate (zero-length) segments
    collapse to their points.
    """
    p1, q1, p2, q2 = (np.atleast_2d(np.asarray(x, dtype=float))
                      for x in (p1, q1, p2, q2))
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d1, r)
    f = np.einsum("ij,ij->i", d2, r)
    denom = a * e - b * b
    tiny = 1e-300
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > tiny, np.clip((b * f - c * e) / denom, 0, 1), 0.0)
        t = np.where(e > tiny, (b * s + f) / e, 0.0)
        s_lo = np.where(a > tiny, np.clip(-c / a, 0, 1), 0.0)
        s_hi = np.where(a > tiny, np.clip((b - c) / a, 0, 1), 0.0)
    s = np.where(t < 0, s_lo, np.where(t > 1, s_hi, s))
    t = np.clip(t, 0.0, 1.0)
    gap = (p1 + s[:, None] * d1) - (p2 + t[:, None] * d2)
    return np.linalg.norm(gap, axis=1)


def contains_points(mesh, points, rng_seed=11):
    """Inside test for a closed mesh by ray-crossing parity.

    A fixed pseudo-random ray direction avoids axis-aligned degeneracy;
    vectorised Moller-Trumbore over all faces.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rng = np.random.default_rng(rng_seed)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    a, b, c = mesh.face_corners()
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.zeros_like(det)
    inv_det[ok] = 1.0 / det[ok]
    inside = np.zeros(len(points), dtype=bool)
    for i, p in enumerate(points):
        tvec = p - a
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv_det
        t = np.einsum("ij,ij->i", e2, qvec) * inv_det
        hits = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        inside[i] = (hits.sum() % 2) == 1
    return inside


def _pair_candidates(mesh):
    """Face pairs close enough to possibly intersect, minus vertex-sharing pairs."""
    from scipy.spatial import cKDTree

    a, b, c = mesh.face_corners()
    cent = (a + b + c) / 3.0
    # circumscribing radius per face around its centroid
    r = np.maximum.reduce([
        np.linalg.norm(a - cent, axis=1),
        np.linalg.norm(b - cent, axis=1),
        np.linalg.norm(c - cent, axis=1),
    ])
    tree = cKDTree(cent)
    pairs = tree.query_pairs(2.0 * float(r.max()), output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    close = np.linalg.norm(cent[i] - cent[j], axis=1) <= r[i] + r[j]
    pairs = pairs[close]
    if len(pairs) == 0:
        return pairs
    fi = mesh.faces[pairs[:, 0]]
    fj = mesh.faces[pairs[:, 1]]
    shared = np.zeros(len(pairs), dtype=bool)
    for u in range(3):
        for v in range(3):
            shared |= fi[:, u] == fj[:, v]
    return pairs[~shared]


def _sat_depths(P, Q, axes, eps_axis):
    """Minimum projection overlap depth over the given axes, per pair.

    P, Q: (m, 3, 3) triangle corners; axes: (m, k, 3).  Axes with norm
    below eps_axis carry no information and are skipped (depth +inf).
    """
    norms = np.linalg.norm(axes, axis=2)
    pp = axes @ P.transpose(0, 2, 1)
    qq = axes @ Q.transpose(0, 2, 1)
    lo = np.maximum(pp.min(axis=2), qq.min(axis=2))
    hi = np.minimum(pp.max(axis=2), qq.max(axis=2))
    depth = np.where(norms > eps_axis, (hi - lo) / np.maximum(norms, eps_axis), np.inf)
    return depth.min(axis=1)


def _sat_touching(P, Q, scale, eps_rel=1e-9):
    """Boolean per pair: true when no separating axis clears the pair.

    Axes tried: the two face normals, the nine edge-edge cross products,
    and the six in-plane edge normals (which settle coplanar overlap).
    A pair counts as touching when every axis overlaps by more than
    -eps_rel * scale.  The two normals are tested first; they separate
    most pairs, so the full axis set runs on a small remainder.
    """
    eps = eps_rel * scale
    eps_axis = 1e-14 * scale * scale
    ep = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 1], P[:, 0] - P[:, 2]], axis=1)
    eq = np.stack([Q[:, 1] - Q[:, 0], Q[:, 2] - Q[:, 1], Q[:, 0] - Q[:, 2]], axis=1)
    n1 = np.cross(ep[:, 0], ep[:, 1])[:, None, :]
    n2 = np.cross(eq[:, 0], eq[:, 1])[:, None, :]
    out = np.zeros(len(P), dtype=bool)
    alive = _sat_depths(P, Q, np.concatenate([n1, n2], axis=1), eps_axis) >= -eps
    if not alive.any():
        return out
    P, Q, ep, eq = P[alive], Q[alive], ep[alive], eq[alive]
    n1, n2 = n1[alive], n2[alive]
    cross_axes = np.cross(ep[:, :, None, :], eq[:, None, :, :]).reshape(len(P), 9, 3)
    inplane_p = np.cross(np.broadcast_to(n1, ep.shape), ep)
    inplane_q = np.cross(np.broadcast_to(n2, eq.shape), eq)
    axes = np.concatenate([cross_axes, inplane_p, inplane_q], axis=1)
    out[alive] = _sat_depths(P, Q, axes, eps_axis) >= -eps
    return out


def self_intersections(mesh, eps_rel=1e-9):
    """Find pairs of non-adjacent faces that overlap or touch.

    Separating-axis test per candidate pair; a pair counts as
    intersecting when no axis separates it by more than eps_rel * mean
    edge length.  Returns an (k, 2) array of face index pairs; embedded
    meshes give k = 0 because non-adjacent faces keep a clear gap.
    """
    pairs = _pair_candidates(mesh)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=int)
    a, b, c = mesh.face_corners()
    P = np.stack([a[pairs[:, 0]], b[pairs[:, 0]], c[pairs[:, 0]]], axis=1)
    Q = np.stack([a[pairs[:, 1]], b[pairs[:, 1]], c[pairs[:, 1]]], axis=1)
    edges = mesh.edges()
    scale = float(np.linalg.norm(mesh.vertices[edges[:, 0]]
                                 - mesh.vertices[edges[:, 1]], axis=1).mean())
    eps = eps_rel * scale
    # touching pairs overlap on every coordinate axis within eps, so an
    # axis-aligned box test discards most candidates before the SAT
    near = np.all((P.min(axis=1) <= Q.max(axis=1) + eps)
                  & (Q.min(axis=1) <= P.max(axis=1) + eps), axis=1)
    pairs, P, Q = pairs[near], P[near], Q[near]
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=int)
    return pairs[_sat_touching(P, Q, scale, eps_rel)]
