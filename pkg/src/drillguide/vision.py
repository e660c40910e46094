"""20 Hz outer loop: bone tracking, integral offset correction and safety.

The vision sensor is slower but more trustworthy than the robot's own
kinematics, so it gets the last word: it re-aims the virtual drill at the
(filtered) planned axis as the bone moves, and trims the spring offsets
until the visually measured drill position sits on that axis.  Occlusion
never terminates anything; only measured excess bone motion does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .controller import TERMINATED, ControllerState, DrillCalibration
from .geometry import RigidTransform, rotation_angle
from .registration import LandmarkSet


@dataclass(frozen=True)
class OuterLoopParams:
    k_i: float = 1.0  # integral gain, 1/s
    rate_hz: float = 20.0
    filter_cutoff_hz: float = 2.0
    clamp_tip: float = 0.025  # m, per component
    clamp_base: float = 0.150  # m, per component
    terminate_translation: float = 0.075  # m
    terminate_rotation: float = math.radians(20.0)

    def __post_init__(self):
        vals = (
            self.k_i,
            self.rate_hz,
            self.filter_cutoff_hz,
            self.clamp_tip,
            self.clamp_base,
            self.terminate_translation,
            self.terminate_rotation,
        )
        if any(v < 0 for v in vals) or self.rate_hz <= 0 or self.filter_cutoff_hz <= 0:
            raise ValueError("outer-loop parameters must be positive")
        if self.clamp_tip >= self.clamp_base:
            raise ValueError("tip clamp must be smaller than base clamp")

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    @property
    def filter_alpha(self) -> float:
        """Per-frame smoothing gain of the first-order low-pass."""
        return 1.0 - math.exp(-2.0 * math.pi * self.filter_cutoff_hz / self.rate_hz)

    def max_base_correction_rad(self, drill_length: float) -> float:
        """Largest pitch/yaw correction the clamped base offset can command."""
        return math.atan(self.clamp_base / drill_length)


@dataclass(frozen=True)
class VisionFrame:
    """One sensor frame; a missing transform means that tracker was occluded."""

    timestamp: float
    t_vb: RigidTransform | None = None  # bone tracker -> sensor
    t_vd: RigidTransform | None = None  # drill tracker -> sensor


@dataclass(frozen=True)
class OuterLoopState:
    """Filter memory and the reference bone pose for the safety watchdog."""

    filt_entry: np.ndarray | None = None
    filt_exit: np.ndarray | None = None
    reference_bone: RigidTransform | None = None


@dataclass(frozen=True)
class OuterLoopDiag:
    e_tip: np.ndarray | None = None  # virtual minus measured, robot frame
    e_base: np.ndarray | None = None
    zbar_tip: np.ndarray | None = None
    zbar_base: np.ndarray | None = None


def update_axis(
    frame: VisionFrame,
    t_rv: RigidTransform,
    t_bs: RigidTransform,
    plan: LandmarkSet,
    ol_state: OuterLoopState,
    ctrl_state: ControllerState,
    params: OuterLoopParams,
) -> tuple[OuterLoopState, ControllerState]:
    """Re-align the virtual drill to the low-pass-filtered entry/exit axis.

    Bone occluded: the axis holds at its last value.
    """
    if frame.t_vb is None:
        return ol_state, ctrl_state
    t_rs = t_rv.compose(frame.t_vb).compose(t_bs)
    entry = t_rs.apply(plan.entry).coords
    exit_ = t_rs.apply(plan.exit).coords
    if ol_state.filt_entry is None:
        f_entry, f_exit = entry, exit_
    else:
        a = params.filter_alpha
        f_entry = ol_state.filt_entry + a * (entry - ol_state.filt_entry)
        f_exit = ol_state.filt_exit + a * (exit_ - ol_state.filt_exit)
    axis = f_exit - f_entry
    axis = axis / np.linalg.norm(axis)
    return (
        replace(ol_state, filt_entry=f_entry, filt_exit=f_exit),
        replace(ctrl_state, axis_origin=f_entry, axis_dir=axis),
    )


def update_offsets(
    frame: VisionFrame,
    t_rv: RigidTransform,
    drill_d: DrillCalibration,
    drill_length: float,
    ctrl_state: ControllerState,
    params: OuterLoopParams,
) -> tuple[ControllerState, OuterLoopDiag]:
    """Integrate the visually measured tip/base errors into the spring offsets.

    The reported errors follow the virtual-minus-measured convention
    (e = z_v - z_bar).  The integrator drives the offsets so the measured
    drill converges onto the virtual one, i.e. o accumulates -k_i e dt;
    see the README note on the sign.  Components clamp at the tip/base
    bounds; a failed drill measurement freezes the offsets for the frame.
    """
    if frame.t_vd is None or ctrl_state.status == TERMINATED:
        return ctrl_state, OuterLoopDiag()
    r = t_rv.rotation @ frame.t_vd.rotation
    o = t_rv.rotation @ frame.t_vd.translation + t_rv.translation
    zbar_tip = r @ drill_d.tip + o
    zbar_base = r @ drill_d.base_point(drill_length) + o
    zv_tip = ctrl_state.virtual_tip()
    zv_base = ctrl_state.virtual_base(drill_length)
    e_tip = zv_tip - zbar_tip
    e_base = zv_base - zbar_base
    dt = params.dt
    o_tip = np.clip(ctrl_state.o_tip - params.k_i * e_tip * dt, -params.clamp_tip, params.clamp_tip)
    o_base = np.clip(
        ctrl_state.o_base - params.k_i * e_base * dt, -params.clamp_base, params.clamp_base
    )
    return (
        replace(ctrl_state, o_tip=o_tip, o_base=o_base),
        OuterLoopDiag(e_tip=e_tip, e_base=e_base, zbar_tip=zbar_tip, zbar_base=zbar_base),
    )


def safety_check(
    frame: VisionFrame,
    ol_state: OuterLoopState,
    params: OuterLoopParams,
    ctrl_state: ControllerState,
) -> tuple[OuterLoopState, ControllerState]:
    """Terminate (latched) when the bone moved too far from its reference pose.

    The reference is the first valid bone measurement after controller
    start.  Occlusion is not a termination condition.
    """
    if ctrl_state.status == TERMINATED:
        return ol_state, ctrl_state
    if frame.t_vb is None:
        return ol_state, ctrl_state
    if ol_state.reference_bone is None:
        return replace(ol_state, reference_bone=frame.t_vb), ctrl_state
    ref = ol_state.reference_bone
    translation = float(np.linalg.norm(frame.t_vb.translation - ref.translation))
    rotation = rotation_angle(frame.t_vb.rotation @ ref.rotation.T)
    if translation > params.terminate_translation or rotation > params.terminate_rotation:
        return ol_state, replace(ctrl_state, status=TERMINATED)
    return ol_state, ctrl_state


def outer_step(
    frame: VisionFrame,
    t_rv: RigidTransform,
    t_bs: RigidTransform,
    plan: LandmarkSet,
    drill_d: DrillCalibration,
    drill_length: float,
    ol_state: OuterLoopState,
    ctrl_state: ControllerState,
    params: OuterLoopParams,
) -> tuple[OuterLoopState, ControllerState, OuterLoopDiag]:
    """One 20 Hz frame: safety first, then axis tracking, then offset trim."""
    ol_state, ctrl_state = safety_check(frame, ol_state, params, ctrl_state)
    if ctrl_state.status == TERMINATED:
        return ol_state, ctrl_state, OuterLoopDiag()
    ol_state, ctrl_state = update_axis(frame, t_rv, t_bs, plan, ol_state, ctrl_state, params)
    ctrl_state, diag = update_offsets(frame, t_rv, drill_d, drill_length, ctrl_state, params)
    return ol_state, ctrl_state, diag
