"""Config-driven serial-arm model: kinematics, point Jacobians and dynamics.

The model is loaded from a small JSON schema (documented in the README)
rather than URDF.  Dynamics quantities come from a world-frame
Newton-Euler recursion (bias torques, gravity) and Jacobian assembly
(mass matrix).  The hot paths avoid numpy's generic cross/stacking
helpers: a KinCache computed once per (q, model) is shared by every
evaluation inside one control step, which is what keeps a pure-Python
1 kHz loop affordable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Point3, RigidTransform, rot_axis_angle

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


def _cross3(a, b) -> np.ndarray:
    # np.cross has ~40 us of broadcasting overhead per call; this is ~1 us.
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


@dataclass(frozen=True)
class Joint:
    name: str
    joint_type: str
    origin_rot: np.ndarray  # 3x3, joint frame in parent frame
    origin_trans: np.ndarray  # (3,)
    axis: np.ndarray  # unit, in joint frame
    limit_lower: float
    limit_upper: float
    torque_max: float

    def __post_init__(self):
        if self.joint_type not in (REVOLUTE, PRISMATIC):
            raise ValueError(f"unknown joint type {self.joint_type!r}")
        if self.limit_lower >= self.limit_upper:
            raise ValueError(f"joint {self.name}: lower limit must be below upper limit")
        n = np.linalg.norm(self.axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"joint {self.name}: axis must be a unit vector")


@dataclass(frozen=True)
class LinkInertia:
    mass: float
    com: np.ndarray  # (3,), in link frame
    inertia: np.ndarray  # 3x3 about the COM, in link frame

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("link mass must be positive")
        i = np.asarray(self.inertia, dtype=float)
        if not np.allclose(i, i.T, atol=1e-12):
            raise ValueError("inertia matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(i) <= 0):
            raise ValueError("inertia matrix must be positive-definite")


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float))
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise ValueError("joint state must be finite")


@dataclass(frozen=True)
class DynamicsTerms:
    m: np.ndarray  # (n, n) mass matrix
    c: np.ndarray  # (n,) Coriolis/centrifugal torques C(q, qd) qd
    g: np.ndarray  # (n,) gravity torques


@dataclass
class KinCache:
    """World-frame geometry at one configuration, shared across evaluations."""

    rots: np.ndarray  # (n, 3, 3) link frames
    origins: np.ndarray  # (n, 3) link frame origins
    axes: np.ndarray  # (n, 3) world joint axes
    coms: np.ndarray  # (n, 3) world link COMs
    inertias_w: np.ndarray  # (n, 3, 3) link inertias about COM, world
    ee_rot: np.ndarray
    ee_origin: np.ndarray


class RobotModel:
    """Immutable serial chain; all evaluation methods are pure."""

    def __init__(
        self,
        joints: list[Joint],
        links: list[LinkInertia],
        ee_offset: tuple[np.ndarray, np.ndarray] | None = None,
        gravity=(0.0, 0.0, -9.81),
        base_frame: str = "r",
        ee_frame: str = "e",
        name: str = "robot",
    ):
        if len(joints) != len(links):
            raise ValueError("need one link inertia per joint")
        self.joints = list(joints)
        self.links = list(links)
        self.n = len(joints)
        if ee_offset is None:
            ee_offset = (np.eye(3), np.zeros(3))
        self.ee_rot = np.asarray(ee_offset[0], dtype=float)
        self.ee_trans = np.asarray(ee_offset[1], dtype=float)
        self.gravity = np.asarray(gravity, dtype=float)
        self.base_frame = base_frame
        self.ee_frame = ee_frame
        self.name = name
        self.limits_lower = np.array([j.limit_lower for j in joints])
        self.limits_upper = np.array([j.limit_upper for j in joints])
        self.torque_max = np.array([j.torque_max for j in joints])
        self._masses = np.array([l.mass for l in links])
        self._revolute = np.array([j.joint_type == REVOLUTE for j in joints])
        self._coms_local = np.array([l.com for l in links], dtype=float)
        self._inertias_local = np.array([l.inertia for l in links], dtype=float)
        # Rodrigues terms premultiplied by the fixed origin rotation, so a
        # joint transform is two scalar-matrix multiply-adds per step.
        self._or_mats = np.array([j.origin_rot for j in joints], dtype=float)
        self._or_k = np.empty((self.n, 3, 3))
        self._or_k2 = np.empty((self.n, 3, 3))
        self._axes_local = np.array([j.axis for j in joints], dtype=float)
        self._origin_trans = np.array([j.origin_trans for j in joints], dtype=float)
        for i, j in enumerate(joints):
            x, y, z = j.axis
            k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
            self._or_k[i] = j.origin_rot @ k
            self._or_k2[i] = j.origin_rot @ (k @ k)

    # -- kinematics ------------------------------------------------------

    def kin(self, q: np.ndarray) -> KinCache:
        """Forward kinematics plus everything dynamics needs, in one pass."""
        n = self.n
        rots = np.empty((n, 3, 3))
        origins = np.empty((n, 3))
        axes = np.empty((n, 3))
        r = np.eye(3)
        p = np.zeros(3)
        for i in range(n):
            if self._revolute[i]:
                rx = self._or_mats[i] + math.sin(q[i]) * self._or_k[i] + (1.0 - math.cos(q[i])) * self._or_k2[i]
                tx = self._origin_trans[i]
            else:
                rx = self._or_mats[i]
                tx = self._origin_trans[i] + self._or_mats[i] @ (self._axes_local[i] * q[i])
            p = r @ tx + p
            r = r @ rx
            rots[i] = r
            origins[i] = p
            axes[i] = r @ self._axes_local[i]
        coms = origins + np.einsum("nij,nj->ni", rots, self._coms_local)
        inertias_w = np.einsum("nij,njk,nlk->nil", rots, self._inertias_local, rots)
        return KinCache(
            rots=rots,
            origins=origins,
            axes=axes,
            coms=coms,
            inertias_w=inertias_w,
            ee_rot=r @ self.ee_rot,
            ee_origin=r @ self.ee_trans + p,
        )

    def ee_transform(self, q: np.ndarray, cache: KinCache | None = None) -> RigidTransform:
        c = cache or self.kin(q)
        return RigidTransform(c.ee_rot, c.ee_origin, from_frame=self.ee_frame, to_frame=self.base_frame)

    def forward_kinematics(self, q: np.ndarray, point_in_ee: Point3) -> Point3:
        if point_in_ee.frame != self.ee_frame:
            return self.ee_transform(q).apply(point_in_ee)  # raises FrameError with context
        c = self.kin(q)
        return Point3(c.ee_rot @ point_in_ee.coords + c.ee_origin, self.base_frame)

    def point_kinematics(self, q: np.ndarray, point_in_ee: np.ndarray, cache: KinCache | None = None):
        """World position and 3xn Jacobian of a point rigidly attached to the end-effector."""
        c = cache or self.kin(q)
        p_world = c.ee_rot @ point_in_ee + c.ee_origin
        arm = p_world - c.origins
        jac = np.cross(c.axes, arm).T  # one batched cross: (n,3) -> 3xn
        if not self._revolute.all():
            jac[:, ~self._revolute] = c.axes[~self._revolute].T
        return p_world, jac

    def point_jacobian(self, q: np.ndarray, point_in_ee: Point3) -> np.ndarray:
        if point_in_ee.frame != self.ee_frame:
            raise ValueError(f"point must be in frame {self.ee_frame!r}")
        _, jac = self.point_kinematics(q, point_in_ee.coords)
        return jac

    # -- dynamics --------------------------------------------------------

    def rnea(
        self,
        q: np.ndarray,
        qdot: np.ndarray,
        qddot: np.ndarray,
        gravity: bool = True,
        cache: KinCache | None = None,
    ) -> np.ndarray:
        """Inverse dynamics: torques realizing (q, qd, qdd), world-frame recursion."""
        n = self.n
        c = cache or self.kin(q)
        origins, axes, coms, inertias_w = c.origins, c.axes, c.coms, c.inertias_w
        omega = np.zeros(3)
        alpha = np.zeros(3)
        a_origin = -self.gravity if gravity else np.zeros(3)
        prev_origin = np.zeros(3)
        omegas = np.empty((n, 3))
        a_coms = np.empty((n, 3))
        n_moments = np.empty((n, 3))
        for i in range(n):
            r_step = origins[i] - prev_origin
            a_origin = a_origin + _cross3(alpha, r_step) + _cross3(omega, _cross3(omega, r_step))
            w = axes[i]
            if self._revolute[i]:
                alpha = alpha + w * qddot[i] + _cross3(omega, w * qdot[i])
                omega = omega + w * qdot[i]
            else:
                a_origin = a_origin + 2.0 * _cross3(omega, w * qdot[i]) + w * qddot[i]
            omegas[i] = omega
            rc = coms[i] - origins[i]
            a_coms[i] = a_origin + _cross3(alpha, rc) + _cross3(omega, _cross3(omega, rc))
            iw = inertias_w[i]
            n_moments[i] = iw @ alpha + _cross3(omega, iw @ omega)
            prev_origin = origins[i]
        tau = np.empty(n)
        f_child = np.zeros(3)
        n_child = np.zeros(3)
        child_origin = np.zeros(3)
        for i in range(n - 1, -1, -1):
            force = self._masses[i] * a_coms[i]
            f_total = force + f_child
            n_total = (
                n_moments[i]
                + _cross3(coms[i] - origins[i], force)
                + n_child
                + _cross3(child_origin - origins[i], f_child)
            )
            tau[i] = axes[i] @ (n_total if self._revolute[i] else f_total)
            f_child = f_total
            n_child = n_total
            child_origin = origins[i]
        return tau

    def bias_torques(self, q: np.ndarray, qdot: np.ndarray, cache: KinCache | None = None) -> np.ndarray:
        """c(q, qd) + g(q): everything but the inertial term."""
        return self.rnea(q, qdot, np.zeros(self.n), gravity=True, cache=cache)

    def gravity_torque(self, q: np.ndarray, cache: KinCache | None = None) -> np.ndarray:
        """Static gravity torques (the velocity-free recursion collapses)."""
        c = cache or self.kin(q)
        n = self.n
        minus_g = -self.gravity
        tau = np.empty(n)
        f_child = np.zeros(3)
        n_child = np.zeros(3)
        child_origin = np.zeros(3)
        for i in range(n - 1, -1, -1):
            force = self._masses[i] * minus_g
            f_total = force + f_child
            n_total = (
                _cross3(c.coms[i] - c.origins[i], force)
                + n_child
                + _cross3(child_origin - c.origins[i], f_child)
            )
            tau[i] = c.axes[i] @ (n_total if self._revolute[i] else f_total)
            f_child = f_total
            n_child = n_total
            child_origin = c.origins[i]
        return tau

    def mass_matrix(self, q: np.ndarray, cache: KinCache | None = None) -> np.ndarray:
        """Joint-space mass matrix assembled from per-link COM Jacobians."""
        c = cache or self.kin(q)
        n = self.n
        arm = c.coms[:, None, :] - c.origins[None, :, :]  # (link, joint, 3)
        jv = np.cross(c.axes[None, :, :], arm)
        jw = np.broadcast_to(c.axes[None, :, :], (n, n, 3)).copy()
        if not self._revolute.all():
            pris = ~self._revolute
            jv[:, pris, :] = c.axes[pris]
            jw[:, pris, :] = 0.0
        mask = np.tril(np.ones((n, n)))[:, :, None]  # joint j moves link i only if j <= i
        jv *= mask
        jw *= mask
        m = np.einsum("ija,ika,i->jk", jv, jv, self._masses)
        m += np.einsum("ija,iab,ikb->jk", jw, c.inertias_w, jw)
        return m

    def dynamics_terms(self, q: np.ndarray, qdot: np.ndarray) -> DynamicsTerms:
        cache = self.kin(q)
        g = self.gravity_torque(q, cache)
        c = self.rnea(q, qdot, np.zeros(self.n), gravity=True, cache=cache) - g
        return DynamicsTerms(m=self.mass_matrix(q, cache), c=c, g=g)

    def kinetic_energy(self, q: np.ndarray, qdot: np.ndarray) -> float:
        """Sum of link kinetic energies via a velocity recursion (independent of mass_matrix)."""
        c = self.kin(q)
        omega = np.zeros(3)
        v_origin = np.zeros(3)
        prev_origin = np.zeros(3)
        ke = 0.0
        for i in range(self.n):
            r_step = c.origins[i] - prev_origin
            v_origin = v_origin + np.cross(omega, r_step)
            if self._revolute[i]:
                omega = omega + c.axes[i] * qdot[i]
            else:
                v_origin = v_origin + c.axes[i] * qdot[i]
            v_com = v_origin + np.cross(omega, c.coms[i] - c.origins[i])
            ke += 0.5 * self._masses[i] * float(v_com @ v_com)
            ke += 0.5 * float(omega @ (c.inertias_w[i] @ omega))
            prev_origin = c.origins[i]
        return ke

    def potential_energy(self, q: np.ndarray) -> float:
        c = self.kin(q)
        return float(-self._masses @ (c.coms @ self.gravity))

    # -- perturbation (true-vs-nominal studies) ---------------------------

    def perturbed(self, rng: np.random.Generator, max_trans: float = 3e-3, max_rot_deg: float = 0.3) -> "RobotModel":
        """Copy with each joint origin displaced (<= max_trans, <= max_rot_deg).

        Stands in for manufacturing tolerances: the controller keeps the
        nominal model while the plant runs the perturbed one.
        """
        joints = []
        for j in self.joints:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dt = direction * rng.uniform(0.0, max_trans)
            rot_axis = rng.normal(size=3)
            rot_axis /= np.linalg.norm(rot_axis)
            dr = rot_axis_angle(rot_axis, math.radians(rng.uniform(0.0, max_rot_deg)))
            joints.append(
                Joint(
                    name=j.name,
                    joint_type=j.joint_type,
                    origin_rot=j.origin_rot @ dr,
                    origin_trans=j.origin_trans + dt,
                    axis=j.axis,
                    limit_lower=j.limit_lower,
                    limit_upper=j.limit_upper,
                    torque_max=j.torque_max,
                )
            )
        return RobotModel(
            joints,
            self.links,
            (self.ee_rot, self.ee_trans),
            self.gravity,
            self.base_frame,
            self.ee_frame,
            self.name + "-perturbed",
        )

    # -- config I/O ------------------------------------------------------

    @classmethod
    def from_json(cls, obj: dict) -> "RobotModel":
        joints = []
        links = []
        for jo in obj["joints"]:
            origin = jo.get("origin", {})
            jtype = jo.get("type", REVOLUTE)
            if jtype == REVOLUTE:
                lo, hi = _angles(jo, "limits")
            else:
                lo, hi = jo["limits_m"]
            joints.append(
                Joint(
                    name=jo["name"],
                    joint_type=jtype,
                    origin_rot=_rpy_matrix(_angles(origin, "rpy")),
                    origin_trans=_lengths(origin, "xyz"),
                    axis=np.asarray(jo["axis"], dtype=float),
                    limit_lower=float(lo),
                    limit_upper=float(hi),
                    torque_max=float(jo["torque_max_nm"]),
                )
            )
            li = jo["link"]
            if "inertia_kgm2" in li:
                inertia = np.asarray(li["inertia_kgm2"], dtype=float)
            else:
                inertia = np.diag(np.asarray(li["inertia_diag_kgm2"], dtype=float))
            links.append(LinkInertia(mass=float(li["mass_kg"]), com=_lengths(li, "com"), inertia=inertia))
        ee = obj.get("ee_offset", {})
        return cls(
            joints,
            links,
            (_rpy_matrix(_angles(ee, "rpy")), _lengths(ee, "xyz")),
            gravity=obj.get("gravity_mps2", (0.0, 0.0, -9.81)),
            base_frame=obj.get("base_frame", "r"),
            ee_frame=obj.get("ee_frame", "e"),
            name=obj.get("name", "robot"),
        )

    @classmethod
    def load(cls, path) -> "RobotModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _lengths(obj: dict, key: str) -> np.ndarray:
    """Read a length vector, accepting metre or millimetre unit suffixes."""
    if f"{key}_m" in obj:
        return np.asarray(obj[f"{key}_m"], dtype=float)
    if f"{key}_mm" in obj:
        return np.asarray(obj[f"{key}_mm"], dtype=float) * 1e-3
    return np.zeros(3)


def _angles(obj: dict, key: str):
    """Read an angle vector/pair, accepting radian or degree unit suffixes."""
    if f"{key}_rad" in obj:
        return np.asarray(obj[f"{key}_rad"], dtype=float)
    if f"{key}_deg" in obj:
        return np.radians(np.asarray(obj[f"{key}_deg"], dtype=float))
    return np.zeros(3)


def _rpy_matrix(rpy) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw (URDF convention): Rz(y) Ry(p) Rx(r)."""
    r, p, y = rpy
    return (
        rot_axis_angle([0, 0, 1], y)
        @ rot_axis_angle([0, 1, 0], p)
        @ rot_axis_angle([1, 0, 0], r)
    )
