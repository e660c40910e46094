"""Closed-loop experiment harness: true plant, synthetic vision, trials, metrics.

A scenario bundles two robot models (the true plant and the nominal model
the controller believes), calibration-error magnitudes, vision noise, a
scripted axial feed force and the surgical plan.  Trials are deterministic
in (scenario, seed): every random draw comes from one per-trial generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import PointCalibration, Recording, RecordingEntry
from .controller import (
    RUNNING,
    TERMINATED,
    ControllerParams,
    ControllerState,
    DrillCalibration,
    controller_step,
    initialize_state,
)
from .energy import energy_report
from .geometry import Point3, RigidTransform, UnitVec3, rot_axis_angle
from .registration import LandmarkSet, RegistrationSession, hand_eye_register
from .robot import RobotModel
from .trajlog import LogBuilder, TrajectoryLog
from .vision import OuterLoopParams, OuterLoopState, VisionFrame, outer_step


class ScenarioError(Exception):
    """A scenario file failed validation; the message names the field."""


def _require(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ScenarioError(f"missing field {ctx}.{key}" if ctx else f"missing field {key}")
    return obj[key]


def unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def gauss_vec(rng: np.random.Generator, sigma_norm: float) -> np.ndarray:
    """Isotropic Gaussian 3-vector whose norm has RMS `sigma_norm`."""
    return rng.normal(0.0, sigma_norm / math.sqrt(3.0), size=3)


def perturb_transform(
    t: RigidTransform, rng: np.random.Generator, sigma_m: float, rot_sigma_rad: float
) -> RigidTransform:
    """Measurement-noise model: small random rotation and translation."""
    dr = rot_axis_angle(unit_vector(rng), rng.normal(0.0, rot_sigma_rad))
    return RigidTransform(
        dr @ t.rotation, t.translation + gauss_vec(rng, sigma_m), t.from_frame, t.to_frame
    )


@dataclass(frozen=True)
class VisionNoiseParams:
    sigma_m: float = 0.25e-3  # RMS of the translation noise vector norm
    rot_sigma_deg: float = 0.05
    dropout_prob: float = 0.0
    latency_frames: int = 0

    def __post_init__(self):
        if self.sigma_m < 0 or not (0.0 <= self.dropout_prob <= 1.0) or self.latency_frames < 0:
            raise ScenarioError("vision noise parameters out of range")


@dataclass(frozen=True)
class FeedParams:
    """Scripted operator input along the axis.

    Before start_s a spring/damper "hold" keeps the drill at its approach
    position (the surgeon steadying the tool: the axial degree of freedom
    is deliberately unconstrained, so without a hand on the drill it
    drifts under any residual force).  From start_s the feed force ramps
    0 -> max_n over ramp_s.
    """

    start_s: float = 3.0
    ramp_s: float = 10.0
    max_n: float = 15.0
    hold_stiffness_npm: float = 300.0
    hold_damping_nspm: float = 20.0
    hold_cap_n: float = 10.0
    # Viscous cutting resistance while the bit is inside the bone span;
    # without it the unconstrained axial DOF flies through in milliseconds.
    brake_nspm: float = 200.0

    def force_at(self, t: float) -> float:
        if t < self.start_s:
            return 0.0
        return self.max_n * min(1.0, (t - self.start_s) / self.ramp_s)


@dataclass(frozen=True)
class CalibrationErrorParams:
    """Magnitudes of the synthetic calibration errors drawn per trial.

    The end-effector-frame drill calibration carries the robot's kinematic
    error (millimetres); the drill-tracker-frame calibration is
    vision-grade (sub-millimetre).
    """

    tip_e_bias_m: float = 3e-3
    axis_e_bias_deg: float = 0.3
    tip_d_bias_m: float = 2e-4
    axis_d_bias_deg: float = 0.05
    registration: bool = True  # fresh synthetic bone registration per trial
    registration_noise_m: float = 0.5e-3  # per-axis probe noise
    registration_bias_m: float = 1.0e-3  # per-landmark bias magnitude
    hand_eye: bool = True  # fresh synthetic hand-eye registration per trial
    hand_eye_poses: int = 10


@dataclass(frozen=True)
class ExternalForce:
    t0: float
    t1: float
    point: str  # "tip" | "base"
    force: np.ndarray  # (3,), robot frame

    def __post_init__(self):
        object.__setattr__(self, "force", np.asarray(self.force, dtype=float))
        if self.point not in ("tip", "base"):
            raise ScenarioError("external force point must be 'tip' or 'base'")


@dataclass(frozen=True)
class BoneMove:
    """Step displacement of the bone (and its tracker) at time t, robot frame."""

    t: float
    dp: np.ndarray
    axis: np.ndarray
    angle_rad: float

    def __post_init__(self):
        object.__setattr__(self, "dp", np.asarray(self.dp, dtype=float))
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=float))


@dataclass(frozen=True)
class Scenario:
    robot_config: dict
    controller: ControllerParams
    outer: OuterLoopParams
    q0: np.ndarray
    tool_tip_e: np.ndarray  # true drill tip in the end-effector frame
    tool_axis_e: np.ndarray  # true bit direction in the end-effector frame
    t_ed: RigidTransform  # drill tracker frame in the end-effector frame
    plan: LandmarkSet
    t_rs0: RigidTransform  # initial true scan pose in the robot frame
    t_bs: RigidTransform  # scan -> bone tracker (fixed: pin in bone)
    t_rv: RigidTransform  # true vision sensor pose in the robot frame
    vision: VisionNoiseParams = VisionNoiseParams()
    feed: FeedParams = FeedParams()
    external_forces: tuple[ExternalForce, ...] = ()
    bone_moves: tuple[BoneMove, ...] = ()
    calib: CalibrationErrorParams = CalibrationErrorParams()
    perturb_kinematics: bool = True
    duration_s: float = 10.0
    seed: int = 0
    control_dt: float = 1e-3
    substep: int = 1

    def __post_init__(self):
        object.__setattr__(self, "q0", np.asarray(self.q0, dtype=float))
        object.__setattr__(self, "tool_tip_e", np.asarray(self.tool_tip_e, dtype=float))
        object.__setattr__(self, "tool_axis_e", np.asarray(self.tool_axis_e, dtype=float))
        if self.duration_s <= 0:
            raise ScenarioError("duration_s must be positive")
        if self.substep < 1:
            raise ScenarioError("substep must be >= 1")

    @property
    def frame_steps(self) -> int:
        """Control steps per vision frame."""
        return max(1, round(1.0 / (self.outer.rate_hz * self.control_dt)))

    def to_json(self) -> dict:
        return {
            "robot_config": self.robot_config,
            "controller": self.controller.to_json(),
            "outer": {
                "k_i": self.outer.k_i,
                "rate_hz": self.outer.rate_hz,
                "filter_cutoff_hz": self.outer.filter_cutoff_hz,
                "clamp_tip_m": self.outer.clamp_tip,
                "clamp_base_m": self.outer.clamp_base,
                "terminate_translation_m": self.outer.terminate_translation,
                "terminate_rotation_deg": math.degrees(self.outer.terminate_rotation),
            },
            "q0_rad": self.q0.tolist(),
            "tool": {"tip_e_m": self.tool_tip_e.tolist(), "axis_e": self.tool_axis_e.tolist()},
            "t_ed": self.t_ed.to_json(),
            "plan": self.plan.to_json(),
            "t_rs0": self.t_rs0.to_json(),
            "t_bs": self.t_bs.to_json(),
            "t_rv": self.t_rv.to_json(),
            "vision": {
                "sigma_m": self.vision.sigma_m,
                "rot_sigma_deg": self.vision.rot_sigma_deg,
                "dropout_prob": self.vision.dropout_prob,
                "latency_frames": self.vision.latency_frames,
            },
            "feed": {
                "start_s": self.feed.start_s,
                "ramp_s": self.feed.ramp_s,
                "max_n": self.feed.max_n,
                "hold_stiffness_npm": self.feed.hold_stiffness_npm,
                "hold_damping_nspm": self.feed.hold_damping_nspm,
                "hold_cap_n": self.feed.hold_cap_n,
                "brake_nspm": self.feed.brake_nspm,
            },
            "external_forces": [
                {"t0": f.t0, "t1": f.t1, "point": f.point, "force_n": f.force.tolist()}
                for f in self.external_forces
            ],
            "bone_moves": [
                {"t": m.t, "dp_m": m.dp.tolist(), "axis": m.axis.tolist(), "angle_rad": m.angle_rad}
                for m in self.bone_moves
            ],
            "calibration_errors": {
                "tip_e_bias_m": self.calib.tip_e_bias_m,
                "axis_e_bias_deg": self.calib.axis_e_bias_deg,
                "tip_d_bias_m": self.calib.tip_d_bias_m,
                "axis_d_bias_deg": self.calib.axis_d_bias_deg,
                "registration": self.calib.registration,
                "registration_noise_m": self.calib.registration_noise_m,
                "registration_bias_m": self.calib.registration_bias_m,
                "hand_eye": self.calib.hand_eye,
                "hand_eye_poses": self.calib.hand_eye_poses,
            },
            "perturb_kinematics": self.perturb_kinematics,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "control_dt_s": self.control_dt,
            "substep": self.substep,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        outer = _require(obj, "outer", "")
        vision = obj.get("vision", {})
        feed = obj.get("feed", {})
        calib = obj.get("calibration_errors", {})
        tool = _require(obj, "tool", "")
        try:
            outer_params = OuterLoopParams(
                k_i=float(_require(outer, "k_i", "outer")),
                rate_hz=float(outer.get("rate_hz", 20.0)),
                filter_cutoff_hz=float(outer.get("filter_cutoff_hz", 2.0)),
                clamp_tip=float(outer.get("clamp_tip_m", 0.025)),
                clamp_base=float(outer.get("clamp_base_m", 0.150)),
                terminate_translation=float(outer.get("terminate_translation_m", 0.075)),
                terminate_rotation=math.radians(float(outer.get("terminate_rotation_deg", 20.0))),
            )
        except ValueError as e:
            raise ScenarioError(f"outer: {e}") from e
        return cls(
            robot_config=_require(obj, "robot_config", ""),
            controller=ControllerParams.from_json(_require(obj, "controller", "")),
            outer=outer_params,
            q0=_require(obj, "q0_rad", ""),
            tool_tip_e=_require(tool, "tip_e_m", "tool"),
            tool_axis_e=_require(tool, "axis_e", "tool"),
            t_ed=RigidTransform.from_json(_require(obj, "t_ed", "")),
            plan=LandmarkSet.from_json(_require(obj, "plan", "")),
            t_rs0=RigidTransform.from_json(_require(obj, "t_rs0", "")),
            t_bs=RigidTransform.from_json(_require(obj, "t_bs", "")),
            t_rv=RigidTransform.from_json(_require(obj, "t_rv", "")),
            vision=VisionNoiseParams(
                sigma_m=float(vision.get("sigma_m", 0.25e-3)),
                rot_sigma_deg=float(vision.get("rot_sigma_deg", 0.05)),
                dropout_prob=float(vision.get("dropout_prob", 0.0)),
                latency_frames=int(vision.get("latency_frames", 0)),
            ),
            feed=FeedParams(
                start_s=float(feed.get("start_s", 3.0)),
                ramp_s=float(feed.get("ramp_s", 10.0)),
                max_n=float(feed.get("max_n", 15.0)),
                hold_stiffness_npm=float(feed.get("hold_stiffness_npm", 300.0)),
                hold_damping_nspm=float(feed.get("hold_damping_nspm", 20.0)),
                hold_cap_n=float(feed.get("hold_cap_n", 10.0)),
                brake_nspm=float(feed.get("brake_nspm", 200.0)),
            ),
            external_forces=tuple(
                ExternalForce(float(f["t0"]), float(f["t1"]), f["point"], f["force_n"])
                for f in obj.get("external_forces", [])
            ),
            bone_moves=tuple(
                BoneMove(float(m["t"]), m["dp_m"], m["axis"], float(m["angle_rad"]))
                for m in obj.get("bone_moves", [])
            ),
            calib=CalibrationErrorParams(
                tip_e_bias_m=float(calib.get("tip_e_bias_m", 3e-3)),
                axis_e_bias_deg=float(calib.get("axis_e_bias_deg", 0.3)),
                tip_d_bias_m=float(calib.get("tip_d_bias_m", 2e-4)),
                axis_d_bias_deg=float(calib.get("axis_d_bias_deg", 0.05)),
                registration=bool(calib.get("registration", True)),
                registration_noise_m=float(calib.get("registration_noise_m", 0.5e-3)),
                registration_bias_m=float(calib.get("registration_bias_m", 1.0e-3)),
                hand_eye=bool(calib.get("hand_eye", True)),
                hand_eye_poses=int(calib.get("hand_eye_poses", 10)),
            ),
            perturb_kinematics=bool(obj.get("perturb_kinematics", True)),
            duration_s=float(_require(obj, "duration_s", "")),
            seed=int(obj.get("seed", 0)),
            control_dt=float(obj.get("control_dt_s", 1e-3)),
            substep=int(obj.get("substep", 1)),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as f:
            return cls.from_json(json.load(f))


# -- synthetic recordings (solver inputs) ---------------------------------


@dataclass(frozen=True)
class SyntheticRecording:
    """A generated Recording plus companion streams and the ground truth used."""

    recording: Recording
    extra: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)


def generate_recording(
    kind: str,
    sigma_m: float = 0.0,
    seed: int = 0,
    n: int = 600,
    model: RobotModel | None = None,
    rate_hz: float = 20.0,
) -> SyntheticRecording:
    """Synthesize solver-input recordings mirroring the calibration procedures.

    kinds: "pivot" (30 s of pivoting about a fixed point), "axis"
    (slide-and-rotate along the bit axis), "landmarks" (105 probe
    measurements of 7 landmarks), "handeye" (paired robot/vision poses;
    needs `model`).  Translation noise: vector norm RMS = sigma_m.
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    if kind == "pivot":
        p_body = np.array([0.0, 0.0, 0.15])
        p_fixed = np.array([0.1, 0.2, 0.3])
        entries = []
        for i in range(n):
            # Wide two-axis sweep so the normal matrix is well conditioned.
            ax = math.radians(60.0) * math.sin(2 * math.pi * i / n * 1.7)
            ay = math.radians(60.0) * math.cos(2 * math.pi * i / n * 2.3)
            r = rot_axis_angle([1, 0, 0], ax) @ rot_axis_angle([0, 1, 0], ay)
            o = p_fixed - r @ p_body + gauss_vec(rng, sigma_m)
            entries.append(RecordingEntry(i * dt, RigidTransform(r, o, "p", "v")))
        return SyntheticRecording(
            Recording(tuple(entries)), truth={"point_body": p_body, "point_fixed": p_fixed}
        )
    if kind == "axis":
        p_body = np.array([0.0, 0.0, 0.15])
        axis_body = np.array([0.0, 0.0, 1.0])
        line_point = np.array([0.2, 0.1, 0.05])
        line_dir = np.array([0.3, -0.2, 0.93])
        line_dir = line_dir / np.linalg.norm(line_dir)
        r0 = _rotation_aligning(axis_body, line_dir)
        entries = []
        for i in range(n):
            s = 0.1 * i / (n - 1)  # slide 0 -> 100 mm
            phi = 4 * math.pi * i / (n - 1)  # two turns about the bit
            r = r0 @ rot_axis_angle(axis_body, phi)
            o = line_point + s * line_dir - r @ p_body + gauss_vec(rng, sigma_m)
            entries.append(RecordingEntry(i * dt, RigidTransform(r, o, "d", "v")))
        return SyntheticRecording(
            Recording(tuple(entries)),
            truth={"axis_body": axis_body, "point_body": p_body},
        )
    if kind == "landmarks":
        plan = default_plan()
        t_bs = default_t_bs()
        probe_tip = np.array([0.0, 0.0, 0.12])
        entries = []
        indices = []
        # Protocol: 5 measurements per landmark per round, 3 rounds.
        order = [lm for _ in range(3) for lm in range(len(plan.landmarks)) for _ in range(5)]
        bias = {lm: unit_vector(rng) * 1.0e-3 for lm in range(len(plan.landmarks))}
        for i, lm in enumerate(order):
            target = t_bs.apply(plan.landmarks[lm]).coords + bias[lm] + gauss_vec(rng, sigma_m)
            r = rot_axis_angle(unit_vector(rng), rng.uniform(0, 0.5))
            o = target - r @ probe_tip
            entries.append(RecordingEntry(i * dt, RigidTransform(r, o, "p", "b")))
            indices.append(lm)
        return SyntheticRecording(
            Recording(tuple(entries)),
            truth={
                "t_bs": t_bs,
                "plan": plan,
                "probe_tip": probe_tip,
                "landmark_indices": indices,
                "bias": bias,
            },
        )
    if kind == "handeye":
        if model is None:
            raise ValueError("handeye recordings need a robot model")
        t_rv = default_t_rv()
        t_ed = default_t_ed()
        q0 = default_q0()
        re_entries = []
        vd_entries = []
        t_vr_inv = t_rv.inverse()
        for i in range(n):
            q = q0 + rng.uniform(-0.2, 0.2, size=model.n)
            q = np.clip(q, model.limits_lower + 0.05, model.limits_upper - 0.05)
            t_re = model.ee_transform(q)
            t_vd = t_vr_inv.compose(t_re).compose(t_ed)
            if sigma_m > 0:
                t_vd = perturb_transform(t_vd, rng, sigma_m, 0.0)
            re_entries.append(RecordingEntry(i * dt, t_re))
            vd_entries.append(RecordingEntry(i * dt, t_vd))
        return SyntheticRecording(
            Recording(tuple(re_entries)),
            extra={"t_vd": Recording(tuple(vd_entries))},
            truth={"t_rv": t_rv, "t_ed": t_ed},
        )
    raise ValueError(f"unknown recording kind {kind!r}")


def _rotation_aligning(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """A rotation taking unit vector a to unit vector b."""
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(a @ b)
    if s < 1e-12:
        return np.eye(3) if c > 0 else rot_axis_angle(_any_perpendicular(a), math.pi)
    return rot_axis_angle(v / s, math.atan2(s, c))


def _any_perpendicular(a: np.ndarray) -> np.ndarray:
    v = np.cross(a, [1.0, 0.0, 0.0])
    if np.linalg.norm(v) < 1e-6:
        v = np.cross(a, [0.0, 1.0, 0.0])
    return v / np.linalg.norm(v)


# -- bundled scenario ------------------------------------------------------


def default_q0() -> np.ndarray:
    return np.array([0.0, -math.pi / 4, 0.0, -3 * math.pi / 4, 0.0, math.pi / 2, math.pi / 4])


def default_plan(depth_m: float = 0.030) -> LandmarkSet:
    """Plan in the scan frame: entry at the origin, drilling along +z."""
    pts = [
        (0.030, 0.010, 0.005),
        (-0.025, 0.015, 0.010),
        (0.010, -0.030, 0.020),
        (-0.015, -0.025, 0.000),
        (0.035, -0.010, 0.025),
        (-0.030, -0.005, 0.030),
        (0.005, 0.030, 0.028),
    ]
    return LandmarkSet(
        landmarks=tuple(Point3(p, "s") for p in pts),
        entry=Point3([0.0, 0.0, 0.0], "s"),
        exit=Point3([0.0, 0.0, depth_m], "s"),
    )


def default_t_bs() -> RigidTransform:
    r = rot_axis_angle([1, 0, 0], 0.3) @ rot_axis_angle([0, 1, 0], -0.2)
    return RigidTransform(r, [0.05, 0.03, 0.06], from_frame="s", to_frame="b")


def default_t_rv() -> RigidTransform:
    r = rot_axis_angle([0, 0, 1], math.radians(160)) @ rot_axis_angle([0, 1, 0], math.radians(25))
    return RigidTransform(r, [0.9, 0.5, 0.6], from_frame="v", to_frame="r")


def default_t_ed() -> RigidTransform:
    return RigidTransform(rot_axis_angle([1, 0, 0], math.radians(30)), [0.04, 0.0, 0.06], "d", "e")


def load_bundled_robot_config() -> dict:
    from importlib import resources

    path = resources.files("drillguide") / "configs/robot_7dof.json"
    with path.open() as f:
        return json.load(f)


def default_scenario(
    seed: int = 0,
    duration_s: float = 10.0,
    perturb_kinematics: bool = True,
    approach_m: float = 0.003,
) -> Scenario:
    """Consistent desk-scale drilling setup built around the bundled robot.

    The planned entry point is placed `approach_m` ahead of the true drill
    tip at the start pose, along the true bit axis, so the trial begins
    with the bit on the axis just off the bone surface.
    """
    robot_config = load_bundled_robot_config()
    model = RobotModel.from_json(robot_config)
    q0 = default_q0()
    tool_tip_e = np.array([0.0, 0.0, 0.15])
    tool_axis_e = np.array([0.0, 0.0, 1.0])
    t_re = model.ee_transform(q0)
    tip_r = t_re.rotation @ tool_tip_e + t_re.translation
    axis_r = t_re.rotation @ tool_axis_e
    entry_r = tip_r + approach_m * axis_r
    plan = default_plan()
    # Scan frame: entry at origin, +z along the drilling axis.
    x_s = _any_perpendicular(axis_r)
    y_s = np.cross(axis_r, x_s)
    r_rs = np.column_stack([x_s, y_s, axis_r])
    t_rs0 = RigidTransform(r_rs, entry_r, from_frame="s", to_frame="r")
    return Scenario(
        robot_config=robot_config,
        controller=ControllerParams.default(),
        outer=OuterLoopParams(),
        q0=q0,
        tool_tip_e=tool_tip_e,
        tool_axis_e=tool_axis_e,
        t_ed=default_t_ed(),
        plan=plan,
        t_rs0=t_rs0,
        t_bs=default_t_bs(),
        t_rv=default_t_rv(),
        duration_s=duration_s,
        seed=seed,
        perturb_kinematics=perturb_kinematics,
    )


# -- trial execution -------------------------------------------------------


@dataclass
class TrialMetrics:
    entry_translation_err_mm: float
    exit_translation_err_mm: float
    angular_deviation_deg: float
    max_spring_offset_m: float
    terminated_early: bool

    CSV_HEADER = (
        "trial,seed,entry_translation_err_mm,exit_translation_err_mm,"
        "angular_deviation_deg,max_spring_offset_m,terminated_early"
    )

    def csv_row(self, trial: int, seed: int) -> str:
        return ",".join(
            [
                str(trial),
                str(seed),
                repr(float(self.entry_translation_err_mm)),
                repr(float(self.exit_translation_err_mm)),
                repr(float(self.angular_deviation_deg)),
                repr(float(self.max_spring_offset_m)),
                "1" if self.terminated_early else "0",
            ]
        )


@dataclass
class TrialResult:
    metrics: TrialMetrics
    log: TrajectoryLog
    info: dict


def fit_line_3d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares 3D line through a point cloud: (centroid, unit direction)."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    return centroid, vt[0]


class SimSession:
    """One live closed-loop run; step() advances a single control period.

    run_trial drives it to completion; the websocket server single-steps it
    and injects interactive commands between steps.
    """

    def __init__(self, scenario: Scenario, trial_index: int = 0, max_log_rows: int | None = None):
        self.scenario = scenario
        self.trial_index = trial_index
        self.max_log_rows = max_log_rows  # cap for long-lived interactive sessions
        self.rng = np.random.default_rng([scenario.seed, trial_index])
        sc = scenario

        self.model_nominal = RobotModel.from_json(sc.robot_config)
        if sc.perturb_kinematics:
            self.model_true = self.model_nominal.perturbed(self.rng)
        else:
            self.model_true = self.model_nominal

        # True tool geometry and what the two calibrations believe it is.
        self.tool_true_e = DrillCalibration(sc.tool_tip_e, sc.tool_axis_e, "e")
        cal = sc.calib
        tip_e_cal = sc.tool_tip_e + unit_vector(self.rng) * cal.tip_e_bias_m
        axis_e_cal = rot_axis_angle(unit_vector(self.rng), math.radians(cal.axis_e_bias_deg)) @ sc.tool_axis_e
        self.drill_e_cal = DrillCalibration(tip_e_cal, axis_e_cal, "e")
        tip_d_true = sc.t_ed.inverse().apply(Point3(sc.tool_tip_e, "e")).coords
        axis_d_true = sc.t_ed.rotation.T @ sc.tool_axis_e
        tip_d_cal = tip_d_true + unit_vector(self.rng) * cal.tip_d_bias_m
        axis_d_cal = rot_axis_angle(unit_vector(self.rng), math.radians(cal.axis_d_bias_deg)) @ axis_d_true
        self.drill_d_cal = DrillCalibration(tip_d_cal, axis_d_cal, "d")

        # Fixed true transforms; the bone (and scan) can move during the run.
        self.t_rv_true = sc.t_rv
        self.t_bs_true = sc.t_bs
        self.t_rs_true = sc.t_rs0
        self.t_rb_true = sc.t_rs0.compose(sc.t_bs.inverse())

        self.t_bs_hat = self._synthesize_registration() if cal.registration else sc.t_bs
        self.t_rv_hat = self._synthesize_hand_eye() if cal.hand_eye else sc.t_rv

        self.params = sc.controller
        self.params.buffers.validate_against(self.model_nominal)
        # Mutable copies: the state server may retune these mid-run.
        self.outer_params = sc.outer
        self.vision_noise = sc.vision
        self.feed = sc.feed
        self.dt = sc.control_dt
        self.q = sc.q0.copy()
        self.qd = np.zeros(self.model_true.n)

        # Vision pipeline state: measurement queue implements latency.
        self._latency_queue: list[VisionFrame] = []
        self._last_zbar_tip = np.full(3, np.nan)
        self._last_zbar_base = np.full(3, np.nan)

        # Initial frame (always delivered: the operator confirms tracking
        # before engaging the controller) seeds the axis and safety reference.
        frame0 = self._measure_vision(0.0, force_valid=True)
        t_rs_hat = self.t_rv_hat.compose(frame0.t_vb).compose(self.t_bs_hat)
        entry_r = t_rs_hat.apply(sc.plan.entry).coords
        exit_r = t_rs_hat.apply(sc.plan.exit).coords
        self.ctrl_state = initialize_state(self.model_nominal, self.drill_e_cal, self.q, entry_r, exit_r)
        self.ol_state = OuterLoopState(filt_entry=entry_r, filt_exit=exit_r, reference_bone=frame0.t_vb)

        # The hold keeps the tip at its initial axial offset from the entry.
        tip0, _ = self.model_true.point_kinematics(self.q, self.tool_true_e.tip)
        entry_true = self.t_rs_true.apply(sc.plan.entry).coords
        axis_true = self.t_rs_true.rotation @ self._plan_axis_s
        self._hold_ref = float((tip0 - entry_true) @ axis_true)

        self.k = 0
        self.log = LogBuilder()
        self.interactive_forces: dict[str, tuple[np.ndarray, float]] = {}  # point -> (f, until_t)
        self.applied_moves = 0
        self.drilled_through = False
        self.diverged = False
        self.t_terminated: float | None = None

    # -- setup helpers ----------------------------------------------------

    def _synthesize_registration(self) -> RigidTransform:
        """Fresh bone registration: 105 biased, noisy landmark probes."""
        sc = self.scenario
        session = RegistrationSession(sc.plan, bone_frame="b")
        bias = {
            i: unit_vector(self.rng) * sc.calib.registration_bias_m
            for i in range(len(sc.plan.landmarks))
        }
        for _round in range(3):
            for lm in range(len(sc.plan.landmarks)):
                for _rep in range(5):
                    true_b = self.t_bs_true.apply(sc.plan.landmarks[lm]).coords
                    noise = self.rng.normal(0.0, sc.calib.registration_noise_m, size=3)
                    session.add(lm, Point3(true_b + bias[lm] + noise, "b"))
        self._registration_rms = session.fit.rms
        return session.fit.transform

    def _synthesize_hand_eye(self) -> RigidTransform:
        """Fresh hand-eye fit; robot-side points use the nominal kinematics."""
        sc = self.scenario
        t_vr_inv = self.t_rv_true.inverse()
        pairs = []
        for _ in range(sc.calib.hand_eye_poses):
            q = sc.q0 + self.rng.uniform(-0.25, 0.25, size=self.model_true.n)
            q = np.clip(q, self.model_true.limits_lower + 0.05, self.model_true.limits_upper - 0.05)
            t_re_true = self.model_true.ee_transform(q)
            t_vd = t_vr_inv.compose(t_re_true).compose(sc.t_ed)
            t_vd = perturb_transform(t_vd, self.rng, sc.vision.sigma_m, math.radians(sc.vision.rot_sigma_deg))
            t_re_nom = self.model_nominal.ee_transform(q)
            pairs.append((t_re_nom, t_vd))
        tip_e = PointCalibration(
            point_body=Point3(self.drill_e_cal.tip, "e"),
            point_fixed=Point3([0, 0, 0], "r"),
            rms=0.0,
            n_used=3,
        )
        tip_d = PointCalibration(
            point_body=Point3(self.drill_d_cal.tip, "d"),
            point_fixed=Point3([0, 0, 0], "v"),
            rms=0.0,
            n_used=3,
        )
        result = hand_eye_register(pairs, tip_e, tip_d)
        self._hand_eye_rms = result.fit.rms
        # register_transform fitted vision-frame tips (a) from robot-frame
        # tips (b): that is T^{vr}; the controller wants T^{rv}.
        return result.fit.transform.inverse()

    # -- vision -----------------------------------------------------------

    def _measure_vision(self, t: float, force_valid: bool = False) -> VisionFrame:
        """One raw sensor frame of both trackers (before latency)."""
        sc = self.scenario
        noise = self.vision_noise
        t_vb = None
        t_vd = None
        t_vr_inv = self.t_rv_true.inverse()
        if force_valid or self.rng.uniform() >= noise.dropout_prob:
            t_vb = perturb_transform(
                t_vr_inv.compose(self.t_rb_true),
                self.rng,
                noise.sigma_m,
                math.radians(noise.rot_sigma_deg),
            )
        if force_valid or self.rng.uniform() >= noise.dropout_prob:
            t_re_true = self.model_true.ee_transform(self.q)
            t_vd = perturb_transform(
                t_vr_inv.compose(t_re_true).compose(sc.t_ed),
                self.rng,
                noise.sigma_m,
                math.radians(noise.rot_sigma_deg),
            )
        return VisionFrame(timestamp=t, t_vb=t_vb, t_vd=t_vd)

    def _deliver_frame(self, t: float) -> VisionFrame:
        frame = self._measure_vision(t)
        self._latency_queue.append(frame)
        if len(self._latency_queue) > self.vision_noise.latency_frames:
            return self._latency_queue.pop(0)
        return VisionFrame(timestamp=t)  # nothing delivered yet

    # -- interactive commands (used by the server) -------------------------

    def apply_external_force(self, point: str, force, hold_s: float) -> None:
        if point not in ("tip", "base"):
            raise ValueError("force point must be 'tip' or 'base'")
        self.interactive_forces[point] = (np.asarray(force, dtype=float), self.time + hold_s)

    def move_bone(self, dp, axis, angle_rad: float) -> None:
        dp = np.asarray(dp, dtype=float)
        axis = np.asarray(axis, dtype=float)
        if np.linalg.norm(axis) < 1e-9:
            r = np.eye(3)
        else:
            r = rot_axis_angle(axis, angle_rad)
        # Rotate about the current scan origin, then translate.
        pivot = self.t_rs_true.translation
        for name in ("t_rs_true", "t_rb_true"):
            t = getattr(self, name)
            new_rot = r @ t.rotation
            new_trans = r @ (t.translation - pivot) + pivot + dp
            setattr(self, name, RigidTransform(new_rot, new_trans, t.from_frame, t.to_frame))

    # -- stepping ----------------------------------------------------------

    @property
    def time(self) -> float:
        return self.k * self.dt

    def _scripted_bone_moves(self, t: float) -> None:
        moves = self.scenario.bone_moves
        while self.applied_moves < len(moves) and moves[self.applied_moves].t <= t:
            m = moves[self.applied_moves]
            self.move_bone(m.dp, m.axis, m.angle_rad)
            self.applied_moves += 1

    def _external_generalized_force(self, t: float, cache=None):
        """Scripted feed + scripted wrenches + interactive forces, as joint torques."""
        tip_true, j_tip_true = self.model_true.point_kinematics(self.q, self.tool_true_e.tip, cache)
        f_tip = np.zeros(3)
        f_base = np.zeros(3)
        fp = self.feed
        feed = fp.force_at(t)
        if fp.max_n > 0.0 and not self.drilled_through:
            axis_r = self.t_rs_true.rotation @ self._plan_axis_s
            entry_r = self.t_rs_true.apply(self.scenario.plan.entry).coords
            s = float((tip_true - entry_r) @ axis_r)
            s_dot = float(axis_r @ (j_tip_true @ self.qd))
            if feed != 0.0:
                f_tip = f_tip + feed * axis_r
                depth = float(np.linalg.norm(self.scenario.plan.exit.coords - self.scenario.plan.entry.coords))
                if s < depth + 0.005:
                    f_tip = f_tip - fp.brake_nspm * s_dot * axis_r
            elif fp.hold_stiffness_npm > 0.0:
                f_hold = -fp.hold_stiffness_npm * (s - self._hold_ref) - fp.hold_damping_nspm * s_dot
                f_hold = min(fp.hold_cap_n, max(-fp.hold_cap_n, f_hold))
                f_tip = f_tip + f_hold * axis_r
        for ext in self.scenario.external_forces:
            if ext.t0 <= t < ext.t1:
                if ext.point == "tip":
                    f_tip = f_tip + ext.force
                else:
                    f_base = f_base + ext.force
        for point, (f, until) in list(self.interactive_forces.items()):
            if t >= until:
                del self.interactive_forces[point]
            elif point == "tip":
                f_tip = f_tip + f
            else:
                f_base = f_base + f
        u_e = j_tip_true.T @ f_tip
        if np.any(f_base != 0.0):
            base_pt = self.tool_true_e.base_point(self.params.drill.length)
            _, j_base_true = self.model_true.point_kinematics(self.q, base_pt, cache)
            u_e = u_e + j_base_true.T @ f_base
        return u_e, tip_true

    @property
    def _plan_axis_s(self) -> np.ndarray:
        plan = self.scenario.plan
        d = plan.exit.coords - plan.entry.coords
        return d / np.linalg.norm(d)

    def step(self) -> None:
        """Advance one control period: vision (at its cadence), control, plant."""
        t = self.time
        sc = self.scenario
        self._scripted_bone_moves(t)

        if self.k % sc.frame_steps == 0:
            frame = self._deliver_frame(t)
            self.ol_state, self.ctrl_state, diag = outer_step(
                frame,
                self.t_rv_hat,
                self.t_bs_hat,
                sc.plan,
                self.drill_d_cal,
                self.params.drill.length,
                self.ol_state,
                self.ctrl_state,
                self.outer_params,
            )
            if diag.zbar_tip is not None:
                self._last_zbar_tip = diag.zbar_tip
                self._last_zbar_base = diag.zbar_base

        cache_true = self.model_true.kin(self.q)
        u_e, tip_true = self._external_generalized_force(t, cache_true)
        res = controller_step(
            self.model_nominal, self.drill_e_cal, self.params, self.q, self.qd, self.ctrl_state, self.dt
        )

        # Plant integration (ZOH torques across substeps).
        m_true = self.model_true.mass_matrix(self.q, cache_true)
        report = self._energy_report(res, m_true)
        self._log_row(t, res, u_e, report)

        n_sub = sc.substep
        h = self.dt / n_sub
        q, qd = self.q, self.qd
        for i in range(n_sub):
            if i == 0:
                m_sub, sub_cache = m_true, cache_true
            else:
                sub_cache = self.model_true.kin(q)
                m_sub = self.model_true.mass_matrix(q, sub_cache)
            bias = self.model_true.bias_torques(q, qd, cache=sub_cache)
            qdd = np.linalg.solve(m_sub, res.u_r + u_e - bias)
            qd = qd + h * qdd
            q = q + h * qd
        self.q, self.qd = q, qd
        self.ctrl_state = res.state

        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            self.diverged = True
            self.ctrl_state = replace(self.ctrl_state, status=TERMINATED)
        if self.ctrl_state.status == TERMINATED and self.t_terminated is None:
            self.t_terminated = t
        # Drilled through: true tip passed the exit plane by 5 mm.
        if not self.drilled_through:
            tip_s = self.t_rs_true.inverse().rotation @ (tip_true - self.t_rs_true.translation)
            depth = float(np.linalg.norm(sc.plan.exit.coords - sc.plan.entry.coords))
            if float((tip_s - sc.plan.entry.coords) @ self._plan_axis_s) > depth + 0.005:
                self.drilled_through = True
        self.k += 1

    def _energy_report(self, res, m_true):
        if res.delta_tip is None:
            return None
        return energy_report(
            self.params,
            self.model_nominal.limits_lower,
            self.model_nominal.limits_upper,
            self.q,
            self.qd,
            m_true,
            self.ctrl_state.qdot_v,
            res.delta_tip,
            res.delta_base,
            self.ctrl_state.o_tip,
            self.ctrl_state.o_base,
        )

    def _log_row(self, t, res, u_e, report) -> None:
        nan3 = np.full(3, np.nan)
        self.log.append(
            t=t,
            q=self.q.copy(),
            qd=self.qd.copy(),
            q_v=self.ctrl_state.q_v,
            qd_v=self.ctrl_state.qdot_v,
            o_tip=self.ctrl_state.o_tip.copy(),
            o_base=self.ctrl_state.o_base.copy(),
            z_tip=res.z_tip if res.z_tip is not None else nan3,
            zbar_tip=self._last_zbar_tip.copy(),
            zbar_base=self._last_zbar_base.copy(),
            z_base=res.z_base if res.z_base is not None else nan3,
            zv_tip=res.zv_tip if res.zv_tip is not None else nan3,
            zv_base=res.zv_base if res.zv_base is not None else nan3,
            u_r=res.u_r,
            u_e=u_e,
            ddelta_tip=res.ddelta_tip if res.ddelta_tip is not None else np.zeros(3),
            ddelta_base=res.ddelta_base if res.ddelta_base is not None else np.zeros(3),
            e_robot=report.e_robot if report else 0.0,
            e_drill=report.e_drill_kinetic if report else 0.0,
            e_buffer=report.e_buffer if report else 0.0,
            e_spring_tip=report.e_spring_tip if report else 0.0,
            e_spring_base=report.e_spring_base if report else 0.0,
            e_total=report.total if report else 0.0,
            saturated=res.saturated.astype(float),
            status=0.0 if self.ctrl_state.status == RUNNING else 1.0,
        )
        if self.max_log_rows is not None and len(self.log._rows["t"]) > self.max_log_rows:
            for rows in self.log._rows.values():
                rows.pop(0)

    def snapshot(self) -> dict:
        """Wire-format state message payload (see the serve subcommand).

        Always strict JSON: every number is finite (a diverged state is
        reported through status; its unusable numbers are zeroed).
        """

        def clean(x) -> list[float]:
            return [float(v) if math.isfinite(v) else 0.0 for v in np.asarray(x, dtype=float)]

        report_keys = ("e_robot", "e_drill", "e_buffer", "e_spring_tip", "e_spring_base", "e_total")
        rows = self.log._rows
        energy = {k: (rows[k][-1] if rows[k] else 0.0) for k in report_keys}
        sat = rows["saturated"][-1] if rows["saturated"] else np.zeros(7)
        if np.all(np.isfinite(self.q)):
            kin = self.model_nominal.kin(self.q)
            tip, _ = self.model_nominal.point_kinematics(self.q, self.drill_e_cal.tip, kin)
            base, _ = self.model_nominal.point_kinematics(
                self.q, self.drill_e_cal.base_point(self.params.drill.length), kin
            )
        else:
            tip = np.zeros(3)
            base = np.zeros(3)
        measured = self._last_zbar_tip if np.all(np.isfinite(self._last_zbar_tip)) else tip
        status = self.ctrl_state.status
        if self.diverged:
            status = TERMINATED
        return {
            "type": "state",
            "t": self.time,
            "q": clean(self.q),
            "q_v": float(self.ctrl_state.q_v) if math.isfinite(self.ctrl_state.q_v) else 0.0,
            "tip": clean(tip),
            "tip_measured": clean(measured),
            "base": clean(base),
            "axis": {
                "origin": clean(self.ctrl_state.axis_origin),
                "dir": clean(self.ctrl_state.axis_dir),
            },
            "o_tip": clean(self.ctrl_state.o_tip),
            "o_base": clean(self.ctrl_state.o_base),
            "energy": {
                "robot": float(energy["e_robot"]),
                "drill": float(energy["e_drill"]),
                "buffer": float(energy["e_buffer"]),
                "spring_tip": float(energy["e_spring_tip"]),
                "spring_base": float(energy["e_spring_base"]),
                "total": float(energy["e_total"]),
            },
            "status": status,
            "torque_sat": [bool(v) for v in np.asarray(sat) > 0.5],
        }

    def run(self) -> TrialResult:
        sc = self.scenario
        n_steps = int(round(sc.duration_s / self.dt))
        for _ in range(n_steps):
            self.step()
            if self.diverged:
                break
            if self.drilled_through and self.time > self.feed.start_s + 1.0:
                break
            if self.t_terminated is not None and self.time > self.t_terminated + 0.5:
                break
        log = self.log.build()
        metrics = compute_metrics(self, log)
        info = {
            "registration_rms_m": getattr(self, "_registration_rms", None),
            "hand_eye_rms_m": getattr(self, "_hand_eye_rms", None),
            "drilled_through": self.drilled_through,
            "diverged": self.diverged,
        }
        return TrialResult(metrics=metrics, log=log, info=info)


def true_tip_trajectory_scan(session: SimSession, log: TrajectoryLog) -> np.ndarray:
    """True drill-tip positions in the scan frame for every logged step.

    Uses the true model and true tool; the scan pose follows the scripted
    bone moves (recomputed, not logged).
    """
    sc = session.scenario
    t_rs = sc.t_rs0
    move_idx = 0
    moves = sc.bone_moves
    out = np.empty((log.n, 3))
    for i in range(log.n):
        t = log.t[i]
        while move_idx < len(moves) and moves[move_idx].t <= t:
            m = moves[move_idx]
            r = rot_axis_angle(m.axis, m.angle_rad) if np.linalg.norm(m.axis) > 1e-9 else np.eye(3)
            pivot = t_rs.translation
            t_rs = RigidTransform(r @ t_rs.rotation, r @ (t_rs.translation - pivot) + pivot + m.dp, "s", "r")
            move_idx += 1
        tip_r, _ = session.model_true.point_kinematics(log.q[i], session.tool_true_e.tip)
        out[i] = t_rs.rotation.T @ (tip_r - t_rs.translation)
    return out


def compute_metrics(session: SimSession, log: TrajectoryLog) -> TrialMetrics:
    """Hole-trajectory accuracy vs the plan, measured in the scan frame.

    The drilled axis is the least-squares line through the true tip
    positions while the feed force was active and the tip was within the
    planned bone span; entry/exit errors are in-plane distances in the
    planes perpendicular to the planned axis through entry and exit.
    """
    sc = session.scenario
    plan = sc.plan
    axis_s = (plan.exit.coords - plan.entry.coords)
    depth = float(np.linalg.norm(axis_s))
    axis_s = axis_s / depth

    tip_s = true_tip_trajectory_scan(session, log)
    axial = (tip_s - plan.entry.coords) @ axis_s
    feed_on = log.t >= session.feed.start_s
    in_bone = (axial >= -1e-4) & (axial <= depth + 1e-4)
    running = log.status < 0.5
    rows = feed_on & in_bone & running

    terminated = bool(np.any(log.status > 0.5)) or session.diverged
    max_offset = float(
        max(np.abs(log.o_tip).max(initial=0.0), np.abs(log.o_base).max(initial=0.0))
    )

    if np.count_nonzero(rows) < 10:
        return TrialMetrics(
            entry_translation_err_mm=float("nan"),
            exit_translation_err_mm=float("nan"),
            angular_deviation_deg=float("nan"),
            max_spring_offset_m=max_offset,
            terminated_early=terminated,
        )

    centroid, direction = fit_line_3d(tip_s[rows])
    if float(direction @ axis_s) < 0:
        direction = -direction

    def plane_error(point_on_plan: np.ndarray) -> float:
        denom = float(direction @ axis_s)
        t_star = float((point_on_plan - centroid) @ axis_s) / denom
        hit = centroid + t_star * direction
        return float(np.linalg.norm(hit - point_on_plan))

    angle = math.degrees(math.acos(min(1.0, max(-1.0, float(direction @ axis_s)))))
    return TrialMetrics(
        entry_translation_err_mm=plane_error(plan.entry.coords) * 1e3,
        exit_translation_err_mm=plane_error(plan.exit.coords) * 1e3,
        angular_deviation_deg=angle,
        max_spring_offset_m=max_offset,
        terminated_early=terminated,
    )


def metrics_from_log(scenario: Scenario, trial_index: int, log: TrajectoryLog) -> TrialMetrics:
    """Recompute trial metrics from a saved log.

    Rebuilding the session replays the seeded setup draws, so the true
    model and calibrations match the run that produced the log.
    """
    return compute_metrics(SimSession(scenario, trial_index), log)


def run_trial(scenario: Scenario, trial_index: int = 0) -> TrialResult:
    """Simulate one drilling trial; deterministic in (scenario, trial_index)."""
    return SimSession(scenario, trial_index).run()


def run_batch(scenario: Scenario, n_trials: int) -> list[TrialResult]:
    return [run_trial(scenario, i) for i in range(n_trials)]


def metrics_csv(results: list[TrialResult], scenario: Scenario) -> str:
    lines = [TrialMetrics.CSV_HEADER]
    for i, r in enumerate(results):
        lines.append(r.metrics.csv_row(i, scenario.seed))
    return "\n".join(lines) + "\n"
