"""Registration workflows built on the best-fit solvers.

Bone registration: the operator probes annotated landmarks on the bone and
a running rigid fit relates the scan frame to the bone-tracker frame.
Hand-eye registration: paired robot/vision measurements of the drill tip
relate the robot base frame to the vision sensor frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    PointCalibration,
    RecordingEntry,
    TooFewMeasurements,
    TransformFit,
    register_transform,
    rms_error,
)
from .geometry import Point3, RigidTransform

# The probing protocol requires the two tracker measurements to be
# simultaneous; the sensor runs at 20 Hz, so 50 ms is 2.5 frames.
SIMULTANEITY_WINDOW_S = 0.05


class MeasurementFailed(Exception):
    """A tracker measurement was invalid or the pair was not simultaneous."""


@dataclass(frozen=True)
class LandmarkSet:
    """Surgeon-annotated registration points plus the planned entry/exit, in the scan frame."""

    landmarks: tuple[Point3, ...]
    entry: Point3
    exit: Point3

    def __post_init__(self):
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        if len(self.landmarks) < 3:
            raise ValueError("need at least 3 landmarks")
        frame = self.entry.frame
        if self.exit.frame != frame or any(p.frame != frame for p in self.landmarks):
            raise ValueError("landmarks, entry and exit must share one frame")
        if np.allclose(self.entry.coords, self.exit.coords):
            raise ValueError("entry and exit must differ")

    @property
    def frame(self) -> str:
        return self.entry.frame

    def to_json(self) -> dict:
        return {
            "frame": self.frame,
            "landmarks_m": [list(map(float, p.coords)) for p in self.landmarks],
            "entry_m": list(map(float, self.entry.coords)),
            "exit_m": list(map(float, self.exit.coords)),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LandmarkSet":
        frame = obj["frame"]
        return cls(
            landmarks=tuple(Point3(p, frame) for p in obj["landmarks_m"]),
            entry=Point3(obj["entry_m"], frame),
            exit=Point3(obj["exit_m"], frame),
        )


def probe_measure(
    bone_sample: RecordingEntry,
    probe_sample: RecordingEntry,
    probe_tip: PointCalibration,
    window_s: float = SIMULTANEITY_WINDOW_S,
) -> Point3:
    """One landmark measurement: the calibrated probe tip in the bone-tracker frame.

    `bone_sample` carries the sensor->bone-tracker transform, `probe_sample`
    the probe->sensor transform.  Fails (so the operator can retry) when
    either tracker was occluded or the two samples are not simultaneous.
    """
    if not bone_sample.valid or not probe_sample.valid:
        raise MeasurementFailed("tracker occluded; try again")
    if abs(bone_sample.time - probe_sample.time) > window_s:
        raise MeasurementFailed(
            f"measurements {abs(bone_sample.time - probe_sample.time) * 1e3:.0f} ms apart; try again"
        )
    tip_in_sensor = probe_sample.transform.apply(probe_tip.point_body)
    return bone_sample.transform.apply(tip_in_sensor)


@dataclass
class Measurement:
    landmark_index: int
    point: Point3  # bone-tracker frame


class RegistrationSession:
    """Interactive landmark-probing session with a live rigid fit.

    Measurements accumulate per landmark (repeats are allowed and each
    counts as its own correspondence pair); the fit is recomputed after
    every add/undo so the operator always sees the current RMS.
    """

    def __init__(self, landmark_set: LandmarkSet, bone_frame: str = "b"):
        self.landmark_set = landmark_set
        self.bone_frame = bone_frame
        self.measurements: list[Measurement] = []
        self.fit: TransformFit | None = None

    def add(self, landmark_index: int, point: Point3) -> None:
        if not (0 <= landmark_index < len(self.landmark_set.landmarks)):
            raise IndexError(f"landmark index {landmark_index} out of range")
        if point.frame != self.bone_frame:
            raise ValueError(f"measurement must be in frame {self.bone_frame!r}")
        self.measurements.append(Measurement(landmark_index, point))
        self._refit()

    def undo(self) -> Measurement:
        if not self.measurements:
            raise IndexError("no measurements to undo")
        removed = self.measurements.pop()
        self._refit()
        return removed

    def _distinct_landmarks(self) -> int:
        return len({m.landmark_index for m in self.measurements})

    def _refit(self) -> None:
        if len(self.measurements) < 3 or self._distinct_landmarks() < 3:
            self.fit = None
            return
        measured = [m.point for m in self.measurements]
        referenced = [self.landmark_set.landmarks[m.landmark_index] for m in self.measurements]
        self.fit = register_transform(measured, referenced)

    def per_landmark_errors(self) -> dict[int, list[float]]:
        """Residual distance (m) of each measurement from its landmark, under the current fit."""
        if self.fit is None:
            return {}
        t = self.fit.transform
        out: dict[int, list[float]] = {}
        for m in self.measurements:
            ref = self.landmark_set.landmarks[m.landmark_index]
            err = float(np.linalg.norm(t.apply(ref).coords - m.point.coords))
            out.setdefault(m.landmark_index, []).append(err)
        return out

    def error_histograms(self, bin_m: float = 1e-4) -> dict[int, dict[str, list]]:
        """Per-landmark histogram of residuals, binned at `bin_m` (default 0.1 mm)."""
        out = {}
        for idx, errs in sorted(self.per_landmark_errors().items()):
            bins = np.arange(0.0, max(errs) + 2 * bin_m, bin_m)
            counts, edges = np.histogram(errs, bins=bins)
            out[idx] = {"edges_m": edges.tolist(), "counts": counts.tolist()}
        return out

    def to_json(self) -> dict:
        return {
            "landmark_set": self.landmark_set.to_json(),
            "bone_frame": self.bone_frame,
            "measurements": [
                {"landmark": m.landmark_index, "point_m": list(map(float, m.point.coords))}
                for m in self.measurements
            ],
            "fit": None if self.fit is None else self.fit.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RegistrationSession":
        session = cls(LandmarkSet.from_json(obj["landmark_set"]), bone_frame=obj["bone_frame"])
        for m in obj["measurements"]:
            session.measurements.append(
                Measurement(int(m["landmark"]), Point3(m["point_m"], session.bone_frame))
            )
        session._refit()
        return session

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "RegistrationSession":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class HandEyeResult:
    fit: TransformFit  # robot frame -> vision sensor frame
    n_poses: int

    def __post_init__(self):
        if self.n_poses < 3:
            raise ValueError("hand-eye registration needs at least 3 poses")


def hand_eye_register(
    pose_pairs: list[tuple[RigidTransform, RigidTransform]],
    tip_e: PointCalibration,
    tip_d: PointCalibration,
) -> HandEyeResult:
    """Estimate the robot-base -> vision-sensor transform from paired poses.

    Each pair is (robot->end-effector transform, drill-tracker->sensor
    transform) taken simultaneously.  The calibrated drill tip gives one
    corresponded point per pair in each frame; the rigid fit over all pairs
    is the hand-eye transform.
    """
    if len(pose_pairs) < 3:
        raise TooFewMeasurements(f"hand-eye registration needs >= 3 pose pairs, got {len(pose_pairs)}")
    tips_vision = []
    tips_robot = []
    for t_re, t_vd in pose_pairs:
        tips_vision.append(t_vd.apply(tip_d.point_body))
        tips_robot.append(t_re.apply(tip_e.point_body))
    fit = register_transform(tips_vision, tips_robot)
    return HandEyeResult(fit=fit, n_poses=len(pose_pairs))


def session_rms_of(measurements: list[Measurement], landmark_set: LandmarkSet, fit: TransformFit) -> float:
    """Recompute a session's RMS from scratch (used to cross-check the live fit)."""
    t = fit.transform
    residuals = [
        t.apply(landmark_set.landmarks[m.landmark_index]).coords - m.point.coords
        for m in measurements
    ]
    return rms_error(residuals)
