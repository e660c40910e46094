"""Best-fit solvers: fixed-point (pivot), axis, and rigid transform registration.

All three are batch least-squares solvers over recorded transform
measurements, each reporting an RMS residual in metres so the operator can
judge whether a calibration is good enough to keep.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Point3, RigidTransform, UnitVec3

# Degeneracy thresholds.  The procedures only give qualitative advice
# ("wide range of motion"), so these are configurable defaults.
PIVOT_MIN_SINGULAR_VALUE = 1e-8
AXIS_MIN_SV_RATIO = 3.0
REGISTER_COLLINEAR_RATIO = 1e-10


class CalibrationError(Exception):
    pass


class TooFewMeasurements(CalibrationError):
    pass


class DegenerateMotion(CalibrationError):
    """The recorded motion does not constrain the quantity being solved for."""


class CollinearPoints(CalibrationError):
    pass


class LengthMismatch(CalibrationError):
    pass


class EmptyInput(CalibrationError):
    pass


@dataclass(frozen=True)
class RecordingEntry:
    time: float
    transform: RigidTransform
    valid: bool = True


@dataclass(frozen=True)
class Recording:
    """Timestamped sequence of tagged transform measurements.

    All entries share from/to frames; timestamps are non-decreasing.
    Invalid entries model tracker dropouts: they are kept (so dropout rates
    can be audited) but skipped by every solver.
    """

    entries: tuple[RecordingEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise EmptyInput("recording has no entries")
        first = self.entries[0].transform
        prev_t = -np.inf
        for e in self.entries:
            if e.transform.from_frame != first.from_frame or e.transform.to_frame != first.to_frame:
                raise ValueError("all entries in a recording must share from/to frames")
            if e.time < prev_t:
                raise ValueError("timestamps must be non-decreasing")
            prev_t = e.time
        if not any(e.valid for e in self.entries):
            raise ValueError("recording has no valid entries")

    @property
    def from_frame(self) -> str:
        return self.entries[0].transform.from_frame

    @property
    def to_frame(self) -> str:
        return self.entries[0].transform.to_frame

    def valid_entries(self) -> list[RecordingEntry]:
        return [e for e in self.entries if e.valid]

    @property
    def n_dropped(self) -> int:
        return sum(1 for e in self.entries if not e.valid)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                t = e.transform
                f.write(
                    json.dumps(
                        {
                            "t": e.time,
                            "from": t.from_frame,
                            "to": t.to_frame,
                            "q": [float(v) for v in t.quaternion],
                            "tr": [float(v) for v in t.translation],
                            "valid": e.valid,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load_jsonl(cls, path) -> "Recording":
        entries = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                entries.append(
                    RecordingEntry(
                        time=float(obj["t"]),
                        transform=RigidTransform.from_quat(
                            obj["q"], obj["tr"], obj["from"], obj["to"]
                        ),
                        valid=bool(obj.get("valid", True)),
                    )
                )
        return cls(tuple(entries))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class PointCalibration:
    """A fixed point expressed both in the moving body frame and the sensor frame."""

    point_body: Point3
    point_fixed: Point3
    rms: float
    n_used: int
    n_dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.rms < 0:
            raise ValueError("rms must be non-negative")
        if self.n_used < 3:
            raise ValueError("point calibration needs at least 3 measurements")

    def to_json(self, provenance: str | None = None) -> dict:
        out = {
            "kind": "point",
            "point_body": {"frame": self.point_body.frame, "xyz_m": list(map(float, self.point_body.coords))},
            "point_fixed": {"frame": self.point_fixed.frame, "xyz_m": list(map(float, self.point_fixed.coords))},
            "rms_m": float(self.rms),
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
        }
        if provenance is not None:
            out["input_sha256"] = provenance
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PointCalibration":
        return cls(
            point_body=Point3(obj["point_body"]["xyz_m"], obj["point_body"]["frame"]),
            point_fixed=Point3(obj["point_fixed"]["xyz_m"], obj["point_fixed"]["frame"]),
            rms=float(obj["rms_m"]),
            n_used=int(obj["n_used"]),
            n_dropped=int(obj.get("n_dropped", 0)),
        )


@dataclass(frozen=True)
class AxisCalibration:
    """A fixed axis direction in the moving body frame."""

    axis: UnitVec3
    rms: float
    n_used: int
    n_dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.rms < 0:
            raise ValueError("rms must be non-negative")

    def to_json(self, provenance: str | None = None) -> dict:
        out = {
            "kind": "axis",
            "axis": {"frame": self.axis.frame, "dir": list(map(float, self.axis.dir))},
            "rms_m": float(self.rms),
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
        }
        if provenance is not None:
            out["input_sha256"] = provenance
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AxisCalibration":
        return cls(
            axis=UnitVec3(obj["axis"]["dir"], obj["axis"]["frame"]),
            rms=float(obj["rms_m"]),
            n_used=int(obj["n_used"]),
            n_dropped=int(obj.get("n_dropped", 0)),
        )


@dataclass(frozen=True)
class TransformFit:
    transform: RigidTransform
    rms: float
    n_used: int

    def __post_init__(self):
        if self.rms < 0:
            raise ValueError("rms must be non-negative")

    def to_json(self, provenance: str | None = None) -> dict:
        out = {"kind": "transform", "transform": self.transform.to_json(), "rms_m": float(self.rms), "n_used": self.n_used}
        if provenance is not None:
            out["input_sha256"] = provenance
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TransformFit":
        return cls(
            transform=RigidTransform.from_json(obj["transform"]),
            rms=float(obj["rms_m"]),
            n_used=int(obj["n_used"]),
        )


def rms_error(errors) -> float:
    """Root-mean-square of a list of 3-vector residuals (units of distance)."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise EmptyInput("rms of an empty residual list")
    e = e.reshape(-1, 3)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def pivot_calibrate(
    rec: Recording, min_singular_value: float = PIVOT_MIN_SINGULAR_VALUE
) -> PointCalibration:
    """Locate a point fixed in both the body and the sensor frame.

    The body pivots about a stationary point; each measured transform i
    contributes a row block  [-R_i  I] [p_body; p_fixed] = o_i.  The stacked
    3Nx6 system is solved by orthogonal factorization (lstsq) rather than
    explicit normal equations, for conditioning.

    Raises DegenerateMotion when the rotations do not span enough of a
    range to pin the point down (smallest singular value of the stack below
    `min_singular_value`), e.g. when the body barely rotated.
    """
    entries = rec.valid_entries()
    n = len(entries)
    if n < 3:
        raise TooFewMeasurements(f"pivot calibration needs >= 3 valid measurements, got {n}")
    a = np.zeros((3 * n, 6))
    y = np.zeros(3 * n)
    for i, e in enumerate(entries):
        a[3 * i : 3 * i + 3, 0:3] = -e.transform.rotation
        a[3 * i : 3 * i + 3, 3:6] = np.eye(3)
        y[3 * i : 3 * i + 3] = e.transform.translation
    smin = np.linalg.svd(a, compute_uv=False)[-1]
    if smin < min_singular_value:
        raise DegenerateMotion(
            f"pivoting range too small (smallest singular value {smin:.3g}); "
            "take measurements over a wider range of orientations"
        )
    x, *_ = np.linalg.lstsq(a, y, rcond=None)
    p_body, p_fixed = x[:3], x[3:]
    residuals = (a @ x - y).reshape(n, 3)
    return PointCalibration(
        point_body=Point3(p_body, rec.from_frame),
        point_fixed=Point3(p_fixed, rec.to_frame),
        rms=rms_error(residuals),
        n_used=n,
        n_dropped=rec.n_dropped,
    )


def axis_calibrate(
    rec: Recording,
    known_point: Point3,
    hint: UnitVec3 | None = None,
    min_sv_ratio: float = AXIS_MIN_SV_RATIO,
) -> AxisCalibration:
    """Recover an axis direction fixed in the body frame.

    The body slides along / rotates about an axis through `known_point`
    (a prior point calibration).  The centroid of the transformed known
    points lies on the axis; mapping it back into the body frame per
    measurement traces out the axis, and the dominant right-singular
    vector of the mean-centred trace gives its direction.

    The sign is chosen to have positive dot product with `hint`
    (default: +z of the body frame).

    Raises DegenerateMotion when the first/second singular value ratio is
    below `min_sv_ratio`: the motion did not discriminate one axis (too
    little travel, or rotation only, which leaves the trace a single point).
    """
    entries = rec.valid_entries()
    n = len(entries)
    if n < 3:
        raise TooFewMeasurements(f"axis calibration needs >= 3 valid measurements, got {n}")
    if known_point.frame != rec.from_frame:
        raise ValueError(
            f"known point must be in the recording body frame {rec.from_frame!r}, got {known_point.frame!r}"
        )
    rots = np.array([e.transform.rotation for e in entries])
    trs = np.array([e.transform.translation for e in entries])
    p_fixed = rots @ known_point.coords + trs  # p^a_i per measurement
    centroid_fixed = p_fixed.mean(axis=0)
    # Map the fixed-frame centroid back into the body frame per measurement.
    mu_body = np.einsum("nij,nj->ni", rots.transpose(0, 2, 1), centroid_fixed - trs)
    mean_body = mu_body.mean(axis=0)
    m = mu_body - mean_body
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    if s[0] < 1e-12 or (s[1] / s[0]) > 1.0 / min_sv_ratio:
        ratio = float("inf") if s[1] == 0 else s[0] / s[1]
        raise DegenerateMotion(
            f"motion did not discriminate an axis (singular value ratio {ratio:.3g} < {min_sv_ratio}); "
            "slide further along the axis"
        )
    axis = vt[0]
    hint_dir = hint.dir if hint is not None else np.array([0.0, 0.0, 1.0])
    if float(axis @ hint_dir) < 0:
        axis = -axis
    d = mu_body - known_point.coords
    residuals = d - np.outer(d @ axis, axis)
    return AxisCalibration(
        axis=UnitVec3(axis, rec.from_frame),
        rms=rms_error(residuals),
        n_used=n,
        n_dropped=rec.n_dropped,
    )


def register_transform(points_a: list[Point3], points_b: list[Point3]) -> TransformFit:
    """Best-fit rigid transform T mapping points_b onto points_a (matched by index).

    Centroid subtraction, 3x3 cross-covariance, SVD, with the reflection
    guard R = V diag(1, 1, det(V U^T)) U^T, translation from centroids.
    """
    if len(points_a) != len(points_b):
        raise LengthMismatch(f"{len(points_a)} points vs {len(points_b)}")
    n = len(points_a)
    if n < 3:
        raise TooFewMeasurements(f"transform registration needs >= 3 point pairs, got {n}")
    frame_a = points_a[0].frame
    frame_b = points_b[0].frame
    if any(p.frame != frame_a for p in points_a) or any(p.frame != frame_b for p in points_b):
        raise ValueError("each point list must be expressed in a single frame")
    pa = np.array([p.coords for p in points_a])
    pb = np.array([p.coords for p in points_b])
    ca = pa.mean(axis=0)
    cb = pb.mean(axis=0)
    h = (pb - cb).T @ (pa - ca)
    u, s, vt = np.linalg.svd(h)
    if s[1] < REGISTER_COLLINEAR_RATIO * s[0]:
        raise CollinearPoints("points are (near) collinear; the rotation about the line is unconstrained")
    v = vt.T
    r = v @ np.diag([1.0, 1.0, float(np.linalg.det(v @ u.T))]) @ u.T
    t = ca - r @ cb
    transform = RigidTransform.from_matrix(r, t, from_frame=frame_b, to_frame=frame_a)
    residuals = (pb @ transform.rotation.T + transform.translation) - pa
    return TransformFit(transform=transform, rms=rms_error(residuals), n_used=n)
