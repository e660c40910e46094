"""Frames, rigid transforms, points and unit vectors.

Every quantity carries an explicit frame tag (short strings such as "v",
"r", "s", "p", "b", "m", "d", "e").  Frame tags are checked at runtime on
every apply/compose: with this many frames in play, a silent frame mix-up
is the dominant failure mode, so we fail loudly instead.

Rotations are stored as 3x3 matrices; unit quaternions are accepted at
I/O boundaries and converted on the way in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Matrices are accepted as rotations when R R^T = I and det R = +1 within
# this tolerance.  Noisier inputs may be repaired (see from_matrix) up to
# REPAIR_LIMIT; a defect beyond that signals corrupt data, not float noise.
ORTHO_TOL = 1e-9
REPAIR_LIMIT = 1e-3


class GeometryError(Exception):
    pass


class FrameError(GeometryError):
    """Operands do not share the frame the operation requires."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {v.shape}")
    return v


def _as_mat3(x) -> np.ndarray:
    m = np.asarray(x, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got shape {m.shape}")
    return m


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def orthonormality_defect(m: np.ndarray) -> float:
    """Frobenius norm of R R^T - I (0 for a perfect rotation)."""
    return float(np.linalg.norm(m @ m.T - np.eye(3)))


def nearest_rotation(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a near-rotation matrix onto SO(3) via SVD.

    Returns the closest proper rotation and the Frobenius-norm correction
    applied.  Reflections are flipped through the smallest singular value.
    """
    m = _as_mat3(m)
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r, float(np.linalg.norm(r - m))


def rot_axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a rotation of `angle` rad about `axis` (Rodrigues)."""
    a = _as_vec3(axis)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    a = a / n
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Magnitude of the axis-angle rotation encoded by `r`, in radians."""
    c = (float(np.trace(r)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion [w, x, y, z] to rotation matrix; normalizes input."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError("quaternion must be [w, x, y, z]")
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("quaternion has near-zero norm")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion [w, x, y, z], w >= 0."""
    r = _as_mat3(r)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _check_frame(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise ValueError("frame tag must be a non-empty string")
    return name


@dataclass(frozen=True)
class Point3:
    """A point with coordinates in metres, tagged with its frame."""

    coords: np.ndarray
    frame: str

    def __post_init__(self):
        object.__setattr__(self, "coords", _readonly(_as_vec3(self.coords)))
        _check_frame(self.frame)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")

    def distance_to(self, other: "Point3") -> float:
        if other.frame != self.frame:
            raise FrameError(f"distance between frames {self.frame!r} and {other.frame!r}")
        return float(np.linalg.norm(self.coords - other.coords))


@dataclass(frozen=True)
class UnitVec3:
    """A unit direction vector tagged with its frame.

    Input is normalized; a norm off by more than 1e-6 is rejected as a
    sign the caller passed something that was never meant to be a direction.
    """

    dir: np.ndarray
    frame: str

    def __post_init__(self):
        d = _as_vec3(self.dir)
        n = float(np.linalg.norm(d))
        if not math.isfinite(n) or abs(n - 1.0) > 1e-6:
            raise ValueError(f"direction norm {n} too far from 1")
        object.__setattr__(self, "dir", _readonly(d / n))
        _check_frame(self.frame)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform mapping points from `from_frame` into `to_frame`.

    Applying the transform computes R p + o.  `ortho_correction` records
    the Frobenius-norm repair applied when the transform was built from a
    noisy matrix (0 when none was needed).
    """

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str
    ortho_correction: float = field(default=0.0, compare=False)

    def __post_init__(self):
        r = _as_mat3(self.rotation)
        defect = orthonormality_defect(r)
        if defect > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError(
                f"rotation is not orthonormal (defect {defect:.3g}); "
                "use from_matrix to repair noisy input"
            )
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(_as_vec3(self.translation)))
        _check_frame(self.from_frame)
        _check_frame(self.to_frame)

    @classmethod
    def identity(cls, frame: str, to_frame: str | None = None) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), frame, frame if to_frame is None else to_frame)

    @classmethod
    def from_matrix(cls, rotation, translation, from_frame: str, to_frame: str) -> "RigidTransform":
        """Build from a possibly-noisy 3x3 matrix.

        Defects up to REPAIR_LIMIT are projected onto the nearest rotation
        and the correction magnitude recorded; larger defects are rejected.
        """
        m = _as_mat3(rotation)
        defect = orthonormality_defect(m)
        if defect > REPAIR_LIMIT:
            raise ValueError(f"rotation defect {defect:.3g} exceeds repair limit {REPAIR_LIMIT}")
        if defect > ORTHO_TOL or np.linalg.det(m) < 0:
            r, correction = nearest_rotation(m)
        else:
            r, correction = m, 0.0
        return cls(r, translation, from_frame, to_frame, ortho_correction=correction)

    @classmethod
    def from_quat(cls, quat, translation, from_frame: str, to_frame: str) -> "RigidTransform":
        return cls(quat_to_matrix(quat), translation, from_frame, to_frame)

    @property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def apply(self, p: Point3) -> Point3:
        if p.frame != self.from_frame:
            raise FrameError(f"transform expects frame {self.from_frame!r}, point is in {p.frame!r}")
        return Point3(self.rotation @ p.coords + self.translation, self.to_frame)

    def rotate(self, v: UnitVec3) -> UnitVec3:
        if v.frame != self.from_frame:
            raise FrameError(f"transform expects frame {self.from_frame!r}, vector is in {v.frame!r}")
        return UnitVec3(self.rotation @ v.dir, self.to_frame)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: first apply `other`, then `self`."""
        if self.from_frame != other.to_frame:
            raise FrameError(
                f"cannot chain {other.from_frame!r}->{other.to_frame!r} "
                f"into {self.from_frame!r}->{self.to_frame!r}"
            )
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.from_frame,
            self.to_frame,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.to_frame, self.from_frame)

    def to_json(self) -> dict:
        return {
            "from": self.from_frame,
            "to": self.to_frame,
            "q": [float(v) for v in self.quaternion],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RigidTransform":
        return cls.from_quat(obj["q"], obj["t"], obj["from"], obj["to"])


def apply(t: RigidTransform, p: Point3) -> Point3:
    return t.apply(p)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()
