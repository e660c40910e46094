"""1 kHz inner-loop controller: a virtual prismatic drill tied to the robot.

The virtual drill slides on the planned entry/exit axis and is connected
to the calibrated drill tip and to a point a long lever `L` up the bit
(the "base") by saturating spring/damper pairs.  Interaction forces map
to joint torques through point-Jacobian transposes; joint-limit buffers
and gravity compensation complete the torque command.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .robot import RobotModel

RUNNING = "running"
TERMINATED = "terminated"

# Below this extension the spring force is returned as exactly zero
# (removable singularity of delta/|delta|).
SPRING_EPS = 1e-12


@dataclass(frozen=True)
class SpringDamperParams:
    k: float  # stiffness, N/m
    sigma: float  # saturation force, N
    b: float  # damping, N s/m

    def __post_init__(self):
        if self.k <= 0 or self.sigma <= 0 or self.b < 0:
            raise ValueError("need k > 0, sigma > 0, b >= 0")


@dataclass(frozen=True)
class VirtualDrillParams:
    m_v: float  # inertance, kg (unaffected by gravity)
    b_v: float  # viscous coefficient, N s/m
    length: float  # tip-to-base lever, m

    def __post_init__(self):
        if self.m_v <= 0 or self.b_v < 0 or self.length <= 0:
            raise ValueError("need m_v > 0, b_v >= 0, length > 0")


@dataclass(frozen=True)
class JointBufferParams:
    """Per-joint limit buffers: nonlinear spring + gain-scheduled damper.

    theta is the distance from the hard limit at which the spring engages;
    the extra damping fades in over phi before that, reaching b_min + b_plus
    at the spring engagement point.  b_min acts everywhere.
    """

    k: np.ndarray
    b_min: np.ndarray
    b_plus: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for name in ("k", "b_min", "b_plus", "theta", "phi"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"buffer parameter {name} must be non-negative")
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.k)

    def validate_against(self, model: RobotModel) -> None:
        half_range = (model.limits_upper - model.limits_lower) / 2.0
        if np.any(self.theta + self.phi >= half_range):
            raise ValueError("buffer engagement zones overlap from both limits")


@dataclass(frozen=True)
class ControllerParams:
    tip: SpringDamperParams
    base: SpringDamperParams
    drill: VirtualDrillParams
    buffers: JointBufferParams
    # Keeps the original (discontinuous) buffer-spring extension formula
    # available for inspection; see buffer_torque.
    printed_buffer_spring: bool = False

    @classmethod
    def default(cls) -> "ControllerParams":
        return cls(
            tip=SpringDamperParams(k=4000.0, sigma=20.0, b=40.0),
            base=SpringDamperParams(k=100.0, sigma=3.0, b=0.2),
            drill=VirtualDrillParams(m_v=1.0, b_v=0.5, length=2.0),
            buffers=JointBufferParams(
                k=np.array([50.0, 50.0, 50.0, 60.0, 35.0, 30.0, 30.0]),
                b_min=np.array([0.5, 0.5, 0.3, 0.3, 0.2, 0.2, 0.1]),
                b_plus=np.array([4.0, 4.0, 4.0, 5.0, 2.0, 1.5, 1.0]),
                theta=np.array([0.3, 0.2, 0.2, 0.3, 0.35, 0.35, 0.35]),
                phi=np.array([0.4, 0.2, 0.2, 0.3, 0.35, 0.35, 0.35]),
            ),
        )

    def to_json(self) -> dict:
        return {
            "tip_spring": {"stiffness_npm": self.tip.k, "saturation_n": self.tip.sigma, "damping_nspm": self.tip.b},
            "base_spring": {"stiffness_npm": self.base.k, "saturation_n": self.base.sigma, "damping_nspm": self.base.b},
            "virtual_drill": {"inertance_kg": self.drill.m_v, "damping_nspm": self.drill.b_v, "length_m": self.drill.length},
            "joint_buffers": [
                {
                    "stiffness_nmprad": float(self.buffers.k[j]),
                    "damping_min_nmsprad": float(self.buffers.b_min[j]),
                    "damping_extra_nmsprad": float(self.buffers.b_plus[j]),
                    "engage_rad": float(self.buffers.theta[j]),
                    "fade_rad": float(self.buffers.phi[j]),
                }
                for j in range(self.buffers.n)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ControllerParams":
        tip = obj["tip_spring"]
        base = obj["base_spring"]
        drill = obj["virtual_drill"]
        buf = obj["joint_buffers"]
        return cls(
            tip=SpringDamperParams(tip["stiffness_npm"], tip["saturation_n"], tip["damping_nspm"]),
            base=SpringDamperParams(base["stiffness_npm"], base["saturation_n"], base["damping_nspm"]),
            drill=VirtualDrillParams(drill["inertance_kg"], drill["damping_nspm"], drill["length_m"]),
            buffers=JointBufferParams(
                k=np.array([b["stiffness_nmprad"] for b in buf]),
                b_min=np.array([b["damping_min_nmsprad"] for b in buf]),
                b_plus=np.array([b["damping_extra_nmsprad"] for b in buf]),
                theta=np.array([b["engage_rad"] for b in buf]),
                phi=np.array([b["fade_rad"] for b in buf]),
            ),
        )

    @classmethod
    def load(cls, path) -> "ControllerParams":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass(frozen=True)
class DrillCalibration:
    """Calibrated drill-bit geometry in one frame: tip point and bit direction."""

    tip: np.ndarray  # (3,), m
    axis: np.ndarray  # (3,), unit
    frame: str

    def __post_init__(self):
        object.__setattr__(self, "tip", np.asarray(self.tip, dtype=float))
        a = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(a)
        if abs(n - 1.0) > 1e-6:
            raise ValueError("drill axis must be a unit vector")
        object.__setattr__(self, "axis", a / n)

    def base_point(self, length: float) -> np.ndarray:
        return self.tip + length * self.axis


@dataclass(frozen=True)
class ControllerState:
    """Virtual-drill coordinate, spring offsets, filtered axis and run status.

    All vectors are in the robot frame.  `q_v` is the virtual drill's
    position along the axis measured from `axis_origin`.
    """

    q_v: float
    qdot_v: float
    o_tip: np.ndarray
    o_base: np.ndarray
    axis_origin: np.ndarray
    axis_dir: np.ndarray
    status: str = RUNNING

    def __post_init__(self):
        for name in ("o_tip", "o_base", "axis_origin", "axis_dir"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if abs(np.linalg.norm(self.axis_dir) - 1.0) > 1e-6:
            raise ValueError("axis_dir must be a unit vector")

    def virtual_tip(self) -> np.ndarray:
        return self.axis_origin + self.q_v * self.axis_dir

    def virtual_base(self, length: float) -> np.ndarray:
        return self.virtual_tip() + length * self.axis_dir


def spring_force(p: SpringDamperParams, delta: np.ndarray) -> np.ndarray:
    """Saturating spring: sigma * tanh(k |d| / sigma) * d/|d|.

    Stiffness k near the origin, force magnitude bounded by sigma.
    """
    delta = np.asarray(delta, dtype=float)
    d = float(np.linalg.norm(delta))
    if d < SPRING_EPS:
        return np.zeros(3)
    return (p.sigma * math.tanh(p.k * d / p.sigma) / d) * delta


def damper_force(b: float, delta_dot: np.ndarray) -> np.ndarray:
    return b * np.asarray(delta_dot, dtype=float)


def _sat01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def buffer_spring_extension(
    bufs: JointBufferParams,
    lower: np.ndarray,
    upper: np.ndarray,
    q: np.ndarray,
    printed_form: bool = False,
) -> np.ndarray:
    """Buffer spring extension a_j(q_j); zero in the free region.

    The default form is zero at the engagement points (q = upper - theta,
    q = lower + theta) and grows linearly into the limit, which is the
    continuous version of the intended soft constraint.  The printed form
    (offset by -theta at the upper limit and +theta at the lower) jumps at
    engagement; it is kept behind `printed_form` for inspection only.
    """
    hi = upper - bufs.theta
    lo = lower + bufs.theta
    if printed_form:
        a_up = q - upper - bufs.theta
        a_dn = q - lower + bufs.theta
    else:
        a_up = q - hi
        a_dn = q - lo
    return np.where(q > hi, a_up, np.where(q < lo, a_dn, 0.0))


def buffer_damping(bufs: JointBufferParams, lower: np.ndarray, upper: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Gain-scheduled damping coefficient b_j(q_j) >= b_min."""
    up = _sat01((q - (upper - bufs.phi - bufs.theta)) / bufs.phi)
    dn = _sat01((-q + (lower + bufs.phi + bufs.theta)) / bufs.phi)
    return bufs.b_min + bufs.b_plus * (up + dn)


def buffer_torque(
    bufs: JointBufferParams,
    lower: np.ndarray,
    upper: np.ndarray,
    q: np.ndarray,
    qdot: np.ndarray,
    printed_form: bool = False,
) -> np.ndarray:
    """Joint-limit buffer torques nu_j = k_j a_j(q_j) + b_j(q_j) qdot_j."""
    a = buffer_spring_extension(bufs, lower, upper, q, printed_form)
    b = buffer_damping(bufs, lower, upper, q)
    return bufs.k * a + b * qdot


def initialize_state(
    model: RobotModel,
    drill_e: DrillCalibration,
    q: np.ndarray,
    entry_r: np.ndarray,
    exit_r: np.ndarray,
) -> ControllerState:
    """Start the controller with the virtual drill at the current tip.

    q_v is the projection of the current (nominal) tip position onto the
    entry/exit axis, so the springs start with zero stretch along the axis
    and there is no startup jerk.
    """
    axis_origin = np.asarray(entry_r, dtype=float)
    axis_dir = np.asarray(exit_r, dtype=float) - axis_origin
    n = np.linalg.norm(axis_dir)
    if n < 1e-9:
        raise ValueError("entry and exit coincide; no drilling axis")
    axis_dir = axis_dir / n
    tip_r, _ = model.point_kinematics(np.asarray(q, dtype=float), drill_e.tip)
    q_v = float((tip_r - axis_origin) @ axis_dir)
    return ControllerState(
        q_v=q_v,
        qdot_v=0.0,
        o_tip=np.zeros(3),
        o_base=np.zeros(3),
        axis_origin=axis_origin,
        axis_dir=axis_dir,
    )


@dataclass(frozen=True)
class StepResult:
    u_r: np.ndarray  # (n,) commanded joint torques (clamped)
    saturated: np.ndarray  # (n,) bool, torque hit its limit
    state: ControllerState
    # Diagnostics for logging / the energy audit.
    z_tip: np.ndarray = field(default=None, repr=False)
    z_base: np.ndarray = field(default=None, repr=False)
    zv_tip: np.ndarray = field(default=None, repr=False)
    zv_base: np.ndarray = field(default=None, repr=False)
    delta_tip: np.ndarray = field(default=None, repr=False)
    delta_base: np.ndarray = field(default=None, repr=False)
    ddelta_tip: np.ndarray = field(default=None, repr=False)
    ddelta_base: np.ndarray = field(default=None, repr=False)
    f_spring_tip: np.ndarray = field(default=None, repr=False)
    f_spring_base: np.ndarray = field(default=None, repr=False)
    gravity: np.ndarray = field(default=None, repr=False)


def controller_step(
    model: RobotModel,
    drill_e: DrillCalibration,
    params: ControllerParams,
    q: np.ndarray,
    qdot: np.ndarray,
    state: ControllerState,
    dt: float = 1e-3,
) -> StepResult:
    """One 1 kHz update: virtual-drill integration and the torque command.

    Returns gravity-compensation-only hold torques once terminated.  A
    non-finite robot or controller state aborts to the terminated status
    with zero torque (the model cannot even be evaluated there).
    """
    n = model.n
    finite = (
        np.all(np.isfinite(q))
        and np.all(np.isfinite(qdot))
        and math.isfinite(state.q_v)
        and math.isfinite(state.qdot_v)
        and np.all(np.isfinite(state.o_tip))
        and np.all(np.isfinite(state.o_base))
    )
    if not finite:
        return StepResult(
            u_r=np.zeros(n),
            saturated=np.zeros(n, dtype=bool),
            state=replace(state, status=TERMINATED),
        )
    if state.status != RUNNING:
        g = model.gravity_torque(q)
        return StepResult(u_r=g, saturated=np.abs(g) > model.torque_max, state=state, gravity=g)

    length = params.drill.length
    kin = model.kin(q)
    z_tip, j_tip = model.point_kinematics(q, drill_e.tip, kin)
    z_base, j_base = model.point_kinematics(q, drill_e.base_point(length), kin)
    a = state.axis_dir
    zv_tip = state.virtual_tip()
    zv_base = zv_tip + length * a

    delta_tip = z_tip - zv_tip
    delta_base = z_base - zv_base
    ddelta_tip = j_tip @ qdot - a * state.qdot_v
    ddelta_base = j_base @ qdot - a * state.qdot_v

    fs_tip = spring_force(params.tip, delta_tip + state.o_tip)
    fs_base = spring_force(params.base, delta_base + state.o_base)
    f_tip = fs_tip + damper_force(params.tip.b, ddelta_tip)
    f_base = fs_base + damper_force(params.base.b, ddelta_base)

    # Virtual-drill point Jacobians w.r.t. q_v are both the axis direction.
    u_v = float(a @ (f_tip + f_base))
    qdot_v = state.qdot_v + dt * (u_v - params.drill.b_v * state.qdot_v) / params.drill.m_v
    q_v = state.q_v + dt * qdot_v

    g = model.gravity_torque(q, kin)
    nu = buffer_torque(
        params.buffers, model.limits_lower, model.limits_upper, q, qdot, params.printed_buffer_spring
    )
    u_r = g - nu - (j_tip.T @ f_tip + j_base.T @ f_base)
    saturated = np.abs(u_r) > model.torque_max
    u_r = np.clip(u_r, -model.torque_max, model.torque_max)

    return StepResult(
        u_r=u_r,
        saturated=saturated,
        state=replace(state, q_v=q_v, qdot_v=qdot_v),
        z_tip=z_tip,
        z_base=z_base,
        zv_tip=zv_tip,
        zv_base=zv_base,
        delta_tip=delta_tip,
        delta_base=delta_base,
        ddelta_tip=ddelta_tip,
        ddelta_base=ddelta_base,
        f_spring_tip=fs_tip,
        f_spring_base=fs_base,
        gravity=g,
    )


def linearize_virtual_drill(
    drill: VirtualDrillParams, tip: SpringDamperParams
) -> tuple[complex, complex]:
    """Poles of the tip-spring / virtual-drill pair about the origin.

    Approximates the axial dynamics as m_v x'' + (b_v + b_tip) x' + k_tip x = 0
    (the base spring and damper are far smaller and neglected).
    """
    roots = np.roots([drill.m_v, drill.b_v + tip.b, tip.k])
    pair = sorted((complex(r) for r in roots), key=lambda z: z.imag, reverse=True)
    return pair[0], pair[1]
