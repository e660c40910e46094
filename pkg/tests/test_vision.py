import math
from dataclasses import replace

import numpy as np
import pytest

from drillguide.controller import ControllerState, DrillCalibration, spring_force, SpringDamperParams, ControllerParams
from drillguide.geometry import Point3, RigidTransform, rot_axis_angle
from drillguide.sim import default_plan, default_t_bs, default_t_rv
from drillguide.vision import (
    OuterLoopParams,
    OuterLoopState,
    VisionFrame,
    outer_step,
    safety_check,
    update_axis,
    update_offsets,
)


@pytest.fixture
def params():
    return OuterLoopParams()


@pytest.fixture
def plan():
    return default_plan()


@pytest.fixture
def transforms():
    t_rv = default_t_rv()
    t_bs = default_t_bs()
    return t_rv, t_bs


def _ctrl_state(axis_origin=(0.3, 0.0, 0.4), axis_dir=(0.0, 0.0, 1.0)):
    return ControllerState(
        q_v=0.0,
        qdot_v=0.0,
        o_tip=np.zeros(3),
        o_base=np.zeros(3),
        axis_origin=np.array(axis_origin, dtype=float),
        axis_dir=np.array(axis_dir, dtype=float),
    )


def _bone_frame(t_rv, t_rb, t=0.0):
    return VisionFrame(timestamp=t, t_vb=t_rv.inverse().compose(t_rb))


def test_filter_alpha_matches_cutoff(params):
    # First-order exponential: residual after k frames is exp(-2 pi f_c k / rate).
    a = params.filter_alpha
    assert abs((1 - a) - math.exp(-2 * math.pi * params.filter_cutoff_hz / params.rate_hz)) < 1e-15


def test_update_axis_converges_exactly_for_stationary_bone(params, plan, transforms):
    t_rv, t_bs = transforms
    t_rb = RigidTransform(rot_axis_angle([0, 1, 0], 0.4), [0.4, 0.1, 0.2], "b", "r")
    t_rs = t_rb.compose(t_bs)
    entry_expected = t_rs.apply(plan.entry).coords
    exit_expected = t_rs.apply(plan.exit).coords
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    frame = _bone_frame(t_rv, t_rb)
    for _ in range(80):
        ol, ctrl = update_axis(frame, t_rv, t_bs, plan, ol, ctrl, params)
    assert np.linalg.norm(ctrl.axis_origin - entry_expected) < 1e-12
    expected_dir = exit_expected - entry_expected
    expected_dir /= np.linalg.norm(expected_dir)
    assert np.linalg.norm(ctrl.axis_dir - expected_dir) < 1e-12


def test_update_axis_step_response(params, plan, transforms):
    # 5 mm bone step: within 2% of the new value after 4 time constants.
    t_rv, t_bs = transforms
    t_rb0 = RigidTransform(np.eye(3), [0.4, 0.1, 0.2], "b", "r")
    t_rb1 = RigidTransform(np.eye(3), [0.405, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    frame0 = _bone_frame(t_rv, t_rb0)
    for _ in range(200):
        ol, ctrl = update_axis(frame0, t_rv, t_bs, plan, ol, ctrl, params)
    entry0 = ctrl.axis_origin.copy()
    frame1 = _bone_frame(t_rv, t_rb1)
    tau_frames = params.rate_hz / (2 * math.pi * params.filter_cutoff_hz)
    n = math.ceil(4 * tau_frames)
    for _ in range(n):
        ol, ctrl = update_axis(frame1, t_rv, t_bs, plan, ol, ctrl, params)
    step = 0.005
    residual = abs(np.linalg.norm(ctrl.axis_origin - entry0) - step)
    assert residual < 0.02 * step


def test_update_axis_holds_on_occlusion(params, plan, transforms):
    t_rv, t_bs = transforms
    t_rb = RigidTransform(np.eye(3), [0.4, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    ol, ctrl = update_axis(_bone_frame(t_rv, t_rb), t_rv, t_bs, plan, ol, ctrl, params)
    origin_before = ctrl.axis_origin.copy()
    for t in range(20):  # 1 s of occlusion
        ol, ctrl = update_axis(VisionFrame(timestamp=t * 0.05), t_rv, t_bs, plan, ol, ctrl, params)
    assert np.array_equal(ctrl.axis_origin, origin_before)


def _drill_frame(t_rv, zbar_tip_r, zbar_base_r, drill_d, length, t=0.0):
    """Construct a drill-tracker measurement that lands at given robot-frame points."""
    axis_r = zbar_base_r - zbar_tip_r
    axis_r = axis_r / np.linalg.norm(axis_r)
    # Build a t_vd whose tip/base map to the requested points.
    v = np.cross(drill_d.axis, t_rv.rotation.T @ axis_r)
    s = np.linalg.norm(v)
    c = float(drill_d.axis @ (t_rv.rotation.T @ axis_r))
    rot = np.eye(3) if s < 1e-12 else rot_axis_angle(v / s, math.atan2(s, c))
    trans = t_rv.rotation.T @ (zbar_tip_r - t_rv.translation) - rot @ drill_d.tip
    return VisionFrame(timestamp=t, t_vd=RigidTransform(rot, trans, "d", "v"))


@pytest.fixture
def drill_d():
    return DrillCalibration(tip=[0.01, 0.02, 0.05], axis=[0.0, 0.0, 1.0], frame="d")


def test_update_offsets_zero_error_inert(params, transforms, drill_d):
    t_rv, _ = transforms
    ctrl = _ctrl_state()
    length = 2.0
    frame = _drill_frame(t_rv, ctrl.virtual_tip(), ctrl.virtual_base(length), drill_d, length)
    ctrl2, diag = update_offsets(frame, t_rv, drill_d, length, ctrl, params)
    assert np.allclose(diag.e_tip, 0.0, atol=1e-12)
    assert np.allclose(ctrl2.o_tip, 0.0, atol=1e-12)
    assert np.allclose(ctrl2.o_base, 0.0, atol=1e-12)


def test_update_offsets_integrates_constant_error(params, transforms, drill_d):
    t_rv, _ = transforms
    ctrl = _ctrl_state()
    length = 2.0
    bias = np.array([2e-3, 0.0, -1e-3])
    frame = _drill_frame(t_rv, ctrl.virtual_tip() + bias, ctrl.virtual_base(length) + bias, drill_d, length)
    ctrl1, diag = update_offsets(frame, t_rv, drill_d, length, ctrl, params)
    assert np.allclose(diag.e_tip, -bias, atol=1e-12)  # e = virtual - measured
    # o integrates k_i * (measured - virtual) * dt: toward +bias
    assert np.allclose(ctrl1.o_tip, params.k_i * bias * params.dt, atol=1e-12)
    ctrl2, _ = update_offsets(frame, t_rv, drill_d, length, ctrl1, params)
    assert np.allclose(ctrl2.o_tip, 2 * params.k_i * bias * params.dt, atol=1e-12)


def test_update_offsets_clamped_components(params, transforms, drill_d):
    t_rv, _ = transforms
    rng = np.random.default_rng(0)
    ctrl = _ctrl_state()
    length = 2.0
    for _ in range(400):
        wild = rng.uniform(-0.5, 0.5, 3)
        frame = _drill_frame(t_rv, ctrl.virtual_tip() + wild, ctrl.virtual_base(length) + wild, drill_d, length)
        ctrl, _ = update_offsets(frame, t_rv, drill_d, length, ctrl, params)
        assert np.all(np.abs(ctrl.o_tip) <= params.clamp_tip + 1e-15)
        assert np.all(np.abs(ctrl.o_base) <= params.clamp_base + 1e-15)
    assert np.abs(ctrl.o_tip).max() > 0  # it did integrate


def test_update_offsets_zero_gain_inert(transforms, drill_d):
    params = OuterLoopParams(k_i=0.0)
    t_rv, _ = transforms
    ctrl = _ctrl_state()
    length = 2.0
    frame = _drill_frame(t_rv, ctrl.virtual_tip() + [0.01, 0, 0], ctrl.virtual_base(length), drill_d, length)
    for _ in range(50):
        ctrl, _ = update_offsets(frame, t_rv, drill_d, length, ctrl, params)
    assert np.array_equal(ctrl.o_tip, np.zeros(3))
    assert np.array_equal(ctrl.o_base, np.zeros(3))


def test_update_offsets_occlusion_freezes(params, transforms, drill_d):
    t_rv, _ = transforms
    ctrl = replace(_ctrl_state(), o_tip=np.array([1e-3, 0.0, 0.0]))
    ctrl2, diag = update_offsets(VisionFrame(timestamp=0.0), t_rv, drill_d, 2.0, ctrl, params)
    assert np.array_equal(ctrl2.o_tip, ctrl.o_tip)
    assert diag.e_tip is None


def test_offset_power_bound_per_step(params, transforms, drill_d):
    # Injected power (do/dt . f_spring) never exceeds
    # k_i (sigma_tip |e_tip| + sigma_base |e_base|): Cauchy-Schwarz with
    # the saturated force magnitude, checked over random streams.
    cp = ControllerParams.default()
    t_rv, _ = transforms
    rng = np.random.default_rng(1)
    ctrl = _ctrl_state()
    length = cp.drill.length
    for _ in range(300):
        noise_tip = rng.uniform(-0.04, 0.04, 3)
        noise_base = rng.uniform(-0.04, 0.04, 3)
        frame = _drill_frame(
            t_rv, ctrl.virtual_tip() + noise_tip, ctrl.virtual_base(length) + noise_base, drill_d, length
        )
        delta_tip = rng.uniform(-0.01, 0.01, 3)  # arbitrary current spring extension
        delta_base = rng.uniform(-0.01, 0.01, 3)
        before_tip, before_base = ctrl.o_tip.copy(), ctrl.o_base.copy()
        ctrl, diag = update_offsets(frame, t_rv, drill_d, length, ctrl, params)
        if diag.e_tip is None:
            continue
        do_tip = (ctrl.o_tip - before_tip) / params.dt
        do_base = (ctrl.o_base - before_base) / params.dt
        power = do_tip @ spring_force(cp.tip, delta_tip + before_tip) + do_base @ spring_force(
            cp.base, delta_base + before_base
        )
        bound = params.k_i * (
            cp.tip.sigma * np.linalg.norm(diag.e_tip) + cp.base.sigma * np.linalg.norm(diag.e_base)
        )
        assert power <= bound + 1e-9


# -- safety -------------------------------------------------------------------


def test_safety_reference_and_small_motion(params, transforms):
    t_rv, _ = transforms
    t_rb = RigidTransform(np.eye(3), [0.4, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    ol, ctrl = safety_check(_bone_frame(t_rv, t_rb), ol, params, ctrl)
    assert ol.reference_bone is not None
    moved = RigidTransform(np.eye(3), [0.41, 0.1, 0.2], "b", "r")  # 10 mm
    ol, ctrl = safety_check(_bone_frame(t_rv, moved), ol, params, ctrl)
    assert ctrl.status == "running"


def test_safety_translation_termination(params, transforms):
    t_rv, _ = transforms
    t_rb = RigidTransform(np.eye(3), [0.4, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    ol, ctrl = safety_check(_bone_frame(t_rv, t_rb), ol, params, ctrl)
    moved = RigidTransform(np.eye(3), [0.48, 0.1, 0.2], "b", "r")  # 80 mm
    ol, ctrl = safety_check(_bone_frame(t_rv, moved), ol, params, ctrl)
    assert ctrl.status == "terminated"


def test_safety_rotation_termination(params, transforms):
    t_rv, _ = transforms
    t_rb = RigidTransform(rot_axis_angle([0, 1, 0], 0.2), [0.4, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    ol, ctrl = safety_check(_bone_frame(t_rv, t_rb), ol, params, ctrl)
    for axis in ([1, 0, 0], [0, 1, 0], [0.6, -0.4, 0.7]):
        rotated = RigidTransform(
            rot_axis_angle(axis, math.radians(25)) @ t_rb.rotation, t_rb.translation, "b", "r"
        )
        ol2, ctrl2 = safety_check(_bone_frame(t_rv, rotated), ol, params, ctrl)
        assert ctrl2.status == "terminated"
    below = RigidTransform(
        rot_axis_angle([1, 0, 0], math.radians(15)) @ t_rb.rotation, t_rb.translation, "b", "r"
    )
    _, ctrl3 = safety_check(_bone_frame(t_rv, below), ol, params, ctrl)
    assert ctrl3.status == "running"


def test_safety_latches(params, transforms, plan, drill_d):
    t_rv, t_bs = transforms
    t_rb = RigidTransform(np.eye(3), [0.4, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    ol, ctrl = safety_check(_bone_frame(t_rv, t_rb), ol, params, ctrl)
    moved = RigidTransform(np.eye(3), [0.50, 0.1, 0.2], "b", "r")
    ol, ctrl = safety_check(_bone_frame(t_rv, moved), ol, params, ctrl)
    assert ctrl.status == "terminated"
    # A frame back at the reference pose does not resume; outer_step keeps it.
    ol, ctrl = safety_check(_bone_frame(t_rv, t_rb), ol, params, ctrl)
    assert ctrl.status == "terminated"
    ol, ctrl, diag = outer_step(
        _bone_frame(t_rv, t_rb), t_rv, t_bs, plan, drill_d, 2.0, ol, ctrl, params
    )
    assert ctrl.status == "terminated"
    assert diag.e_tip is None


def test_safety_occlusion_does_not_terminate(params, transforms):
    t_rv, _ = transforms
    t_rb = RigidTransform(np.eye(3), [0.4, 0.1, 0.2], "b", "r")
    ol = OuterLoopState()
    ctrl = _ctrl_state()
    ol, ctrl = safety_check(_bone_frame(t_rv, t_rb), ol, params, ctrl)
    for _ in range(100):
        ol, ctrl = safety_check(VisionFrame(timestamp=0.0), ol, params, ctrl)
    assert ctrl.status == "running"


def test_max_base_correction_angle(params):
    # atan(0.150 / 2.0) = 4.2892 degrees of pitch/yaw authority.
    deg = math.degrees(params.max_base_correction_rad(2.0))
    assert abs(deg - 4.2892) < 1e-3
    assert abs(deg - 4.3) < 0.05


def test_params_validation():
    with pytest.raises(ValueError):
        OuterLoopParams(clamp_tip=0.2, clamp_base=0.1)
    with pytest.raises(ValueError):
        OuterLoopParams(rate_hz=-1.0)
