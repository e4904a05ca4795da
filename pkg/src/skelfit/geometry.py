"""Orthonormal frames, rotation vectors, and rigid motions.

Rotations are exchanged as rotation vectors (axis times angle, angle in
[0, pi]) and as unit quaternions with non-negative scalar part, so every
rotation has a single canonical encoding.  Frames are right-handed
orthonormal triples stored as the rows of a 3x3 matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-8
ORTHO_TOL = 1e-8
# below this angle the Rodrigues terms switch to their series expansions
_SMALL_ANGLE = 1e-8


def unit(v):
    """Return v normalised to unit length.

    Raises ValueError on (numerically) zero input instead of returning
    garbage, since a silent NaN here poisons every downstream frame.
    """
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < 1e-300):
        raise ValueError("cannot normalise zero vector")
    return v / n


def is_unit(v, tol=UNIT_TOL):
    return abs(np.linalg.norm(v) - 1.0) <= tol


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal frame.

    ``matrix`` holds the basis vectors as rows, so ``matrix @ v``
    expresses a world vector v in frame coordinates and
    ``matrix.T @ c`` maps frame coordinates back to world.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("frame matrix must be 3x3")
        if np.linalg.norm(m @ m.T - np.eye(3)) > 1e-6:
            raise ValueError("frame rows are not orthonormal")
        if np.linalg.det(m) < 0:
            raise ValueError("frame is left-handed")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def from_rows(cls, f1, f2, f3):
        return cls(np.stack([np.asarray(f1, float),
                             np.asarray(f2, float),
                             np.asarray(f3, float)]))

    @property
    def f1(self):
        return self.matrix[0]

    @property
    def f2(self):
        return self.matrix[1]

    @property
    def f3(self):
        return self.matrix[2]

    def express(self, v):
        """World vector(s) -> coordinates in this frame."""
        return np.asarray(v, float) @ self.matrix.T

    def to_world(self, c):
        """Frame coordinates -> world vector(s)."""
        return np.asarray(c, float) @ self.matrix


def frame_from_normal(f3, hint):
    """Build a frame with third axis f3 and first axis the projection of hint.

    hint must not be parallel to f3; the second axis completes the
    right-handed triple.
    """
    f3 = unit(f3)
    h = np.asarray(hint, float)
    t = h - (h @ f3) * f3
    nt = np.linalg.norm(t)
    if nt < 1e-10 * max(1.0, np.linalg.norm(h)):
        raise ValueError("hint is parallel to the normal")
    f1 = t / nt
    f2 = np.cross(f3, f1)
    return Frame.from_rows(f1, f2, f3)


def rotvec_to_matrix(r):
    """Rodrigues formula; series expansion below the small-angle cutoff."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    K = np.array([[0.0, -r[2], r[1]],
                  [r[2], 0.0, -r[0]],
                  [-r[1], r[0], 0.0]])
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def quat_from_matrix(R):
    """Unit quaternion (w, x, y, z) with w >= 0 from a rotation matrix.

    Uses the largest-pivot variant so the conversion stays stable near
    angle pi.
    """
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        w = 0.5 * np.sqrt(1.0 + t)
        s = 0.25 / w
        q = np.array([w,
                      (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        x = 0.5 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        s = 0.25 / x
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) * s
        q[1 + i] = x
        q[1 + j] = (R[j, i] + R[i, j]) * s
        q[1 + k] = (R[k, i] + R[i, k]) * s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_rotvec(r):
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    if theta < _SMALL_ANGLE:
        # sin(t/2)/t ~ 1/2 - t^2/48
        f = 0.5 - theta * theta / 48.0
        q = np.concatenate([[np.cos(0.5 * theta)], f * r])
    else:
        q = np.concatenate([[np.cos(0.5 * theta)],
                            np.sin(0.5 * theta) / theta * r])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def rotvec_from_quat(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < _SMALL_ANGLE:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return (angle / s) * q[1:]


def matrix_to_rotvec(R):
    """Inverse of rotvec_to_matrix, angle in [0, pi]."""
    return rotvec_from_quat(quat_from_matrix(R))


def apply_rotvec(r, v):
    return np.asarray(v, float) @ rotvec_to_matrix(r).T


def frame_between(a: Frame, b: Frame):
    """Rotation vector carrying frame a to frame b, in a's coordinates.

    The world rotation R_w satisfies R_w a_i = b_i for the basis
    vectors, so R_w = B^T A; conjugating into a's coordinates gives
    R_a = A R_w A^T = A B^T.  The returned vector r reconstructs b as
    ``b.matrix == rotvec_to_matrix(r).T @ a.matrix``.
    """
    return matrix_to_rotvec(a.matrix @ b.matrix.T)


@dataclass(frozen=True)
class RigidMotion:
    """x -> R x + t with R given as a rotation vector."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, float).reshape(3))

    @property
    def matrix(self):
        return rotvec_to_matrix(self.rotation)

    def apply(self, points):
        return np.asarray(points, float) @ self.matrix.T + self.translation

    def apply_vectors(self, vectors):
        return np.asarray(vectors, float) @ self.matrix.T

    def apply_frame(self, f: Frame) -> Frame:
        return Frame(f.matrix @ self.matrix.T)

    def inverse(self):
        R = self.matrix
        return RigidMotion(-self.rotation, -(R.T @ self.translation))

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """Motion equal to applying ``other`` first, then self."""
        R = self.matrix @ other.matrix
        t = self.matrix @ other.translation + self.translation
        return RigidMotion(matrix_to_rotvec(R), t)


def random_rotation(rng) -> np.ndarray:
    """Uniform random rotation vector (via normalised quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return rotvec_from_quat(q)
