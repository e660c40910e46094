import math

import numpy as np
import pytest

from drillguide.calibration import PointCalibration, RecordingEntry, TooFewMeasurements
from drillguide.geometry import Point3, RigidTransform, rot_axis_angle
from drillguide.registration import (
    LandmarkSet,
    MeasurementFailed,
    RegistrationSession,
    hand_eye_register,
    probe_measure,
)
from drillguide.robot import RobotModel
from drillguide.sim import default_plan, default_t_ed, default_t_rv, default_q0

from conftest import random_transform, rotation_gap_rad


def _probe_tip(coords=(0.0, 0.0, 0.1)) -> PointCalibration:
    return PointCalibration(
        point_body=Point3(coords, "p"),
        point_fixed=Point3([0.1, 0.1, 0.1], "v"),
        rms=0.2e-3,
        n_used=100,
    )


def _entry(transform: RigidTransform, t=0.0, valid=True) -> RecordingEntry:
    return RecordingEntry(t, transform, valid)


def test_probe_measure_identity():
    bv = _entry(RigidTransform.identity("v", "b"))
    vp = _entry(RigidTransform.identity("p", "v"))
    p = probe_measure(bv, vp, _probe_tip())
    assert np.allclose(p.coords, [0.0, 0.0, 0.1])
    assert p.frame == "b"


def test_probe_measure_translated_probe():
    bv = _entry(RigidTransform.identity("v", "b"))
    vp = _entry(RigidTransform(np.eye(3), [0.2, 0.0, 0.0], "p", "v"))
    p = probe_measure(bv, vp, _probe_tip())
    assert np.allclose(p.coords, [0.2, 0.0, 0.1])


def test_probe_measure_fails_on_invalid():
    bv = _entry(RigidTransform.identity("v", "b"), valid=False)
    vp = _entry(RigidTransform.identity("p", "v"))
    with pytest.raises(MeasurementFailed):
        probe_measure(bv, vp, _probe_tip())
    with pytest.raises(MeasurementFailed):
        probe_measure(_entry(RigidTransform.identity("v", "b")), _entry(RigidTransform.identity("p", "v"), valid=False), _probe_tip())


def test_probe_measure_fails_on_skew():
    bv = _entry(RigidTransform.identity("v", "b"), t=0.0)
    vp = _entry(RigidTransform.identity("p", "v"), t=0.06)
    with pytest.raises(MeasurementFailed):
        probe_measure(bv, vp, _probe_tip())
    # within the 50 ms window is fine
    probe_measure(bv, _entry(RigidTransform.identity("p", "v"), t=0.04), _probe_tip())


def _session_with_truth(seed=0):
    rng = np.random.default_rng(seed)
    plan = default_plan()
    truth = random_transform(rng, "s", "b")
    session = RegistrationSession(plan, bone_frame="b")
    return session, truth, rng


def test_session_exact_three_measurements():
    session, truth, _ = _session_with_truth()
    assert session.fit is None
    for lm in range(3):
        session.add(lm, truth.apply(session.landmark_set.landmarks[lm]))
    fit = session.fit
    assert fit is not None
    assert np.allclose(fit.transform.rotation, truth.rotation, atol=1e-9)
    assert np.allclose(fit.transform.translation, truth.translation, atol=1e-9)
    assert fit.rms < 1e-12


def test_session_needs_three_distinct_landmarks():
    session, truth, rng = _session_with_truth(1)
    for _ in range(3):
        session.add(0, Point3(rng.uniform(-0.1, 0.1, 3), "b"))
    assert session.fit is None  # only one distinct landmark measured


def test_session_undo_restores_previous_fit_bit_exactly():
    session, truth, rng = _session_with_truth(2)
    for lm in range(4):
        session.add(lm, Point3(truth.apply(session.landmark_set.landmarks[lm]).coords + rng.normal(0, 1e-3, 3), "b"))
    before_rot = session.fit.transform.rotation.copy()
    before_trans = session.fit.transform.translation.copy()
    before_rms = session.fit.rms
    session.add(2, Point3(rng.uniform(-0.1, 0.1, 3), "b"))
    assert session.fit.rms != before_rms
    removed = session.undo()
    assert removed.landmark_index == 2
    assert np.array_equal(session.fit.transform.rotation, before_rot)
    assert np.array_equal(session.fit.transform.translation, before_trans)
    assert session.fit.rms == before_rms


def test_session_fit_permutation_invariant():
    session, truth, rng = _session_with_truth(3)
    measurements = []
    for lm in range(7):
        for _ in range(3):
            pt = Point3(truth.apply(session.landmark_set.landmarks[lm]).coords + rng.normal(0, 1e-3, 3), "b")
            measurements.append((lm, pt))
    for lm, pt in measurements:
        session.add(lm, pt)
    fit1 = session.fit
    session2 = RegistrationSession(session.landmark_set, bone_frame="b")
    order = rng.permutation(len(measurements))
    for i in order:
        session2.add(*measurements[i])
    assert np.allclose(fit1.transform.rotation, session2.fit.transform.rotation, atol=1e-12)
    assert np.allclose(fit1.transform.translation, session2.fit.transform.translation, atol=1e-12)


def test_session_duplicate_all_invariant():
    session, truth, rng = _session_with_truth(4)
    measurements = []
    for lm in range(5):
        pt = Point3(truth.apply(session.landmark_set.landmarks[lm]).coords + rng.normal(0, 1e-3, 3), "b")
        measurements.append((lm, pt))
    for lm, pt in measurements:
        session.add(lm, pt)
    fit1 = session.fit
    for lm, pt in measurements:
        session.add(lm, pt)
    assert np.allclose(fit1.transform.rotation, session.fit.transform.rotation, atol=1e-12)
    assert np.allclose(fit1.transform.translation, session.fit.transform.translation, atol=1e-12)
    assert abs(fit1.rms - session.fit.rms) < 1e-12


def test_session_full_protocol_and_histograms():
    # 15 measurements per landmark x 7 landmarks = 105 total.
    session, truth, rng = _session_with_truth(5)
    for _round in range(3):
        for lm in range(7):
            for _rep in range(5):
                pt = Point3(
                    truth.apply(session.landmark_set.landmarks[lm]).coords + rng.normal(0, 0.5e-3, 3),
                    "b",
                )
                session.add(lm, pt)
    assert len(session.measurements) == 105
    assert session.fit.n_used == 105
    hists = session.error_histograms(bin_m=1e-4)
    assert sorted(hists.keys()) == list(range(7))
    for h in hists.values():
        edges = np.array(h["edges_m"])
        assert np.allclose(np.diff(edges), 1e-4)
        assert sum(h["counts"]) == 15


def test_session_json_roundtrip(tmp_path):
    session, truth, rng = _session_with_truth(6)
    for lm in range(4):
        session.add(lm, truth.apply(session.landmark_set.landmarks[lm]))
    path = tmp_path / "session.json"
    session.save(path)
    back = RegistrationSession.load(path)
    assert len(back.measurements) == 4
    assert np.allclose(back.fit.transform.rotation, session.fit.transform.rotation, atol=1e-15)


def test_session_index_range():
    session, _, _ = _session_with_truth(7)
    with pytest.raises(IndexError):
        session.add(7, Point3([0, 0, 0], "b"))
    with pytest.raises(IndexError):
        session.undo()


# -- hand-eye ------------------------------------------------------------------


def _handeye_setup(seed=0):
    model = RobotModel.from_json(
        __import__("drillguide.sim", fromlist=["load_bundled_robot_config"]).load_bundled_robot_config()
    )
    rng = np.random.default_rng(seed)
    t_rv = default_t_rv()
    t_ed = default_t_ed()
    tip_e = np.array([0.0, 0.0, 0.15])
    tip_d = t_ed.inverse().apply(Point3(tip_e, "e")).coords
    q0 = default_q0()
    return model, rng, t_rv, t_ed, tip_e, tip_d, q0


def _tip_cal(coords, frame, fixed_frame):
    return PointCalibration(
        point_body=Point3(coords, frame),
        point_fixed=Point3([0, 0, 0], fixed_frame),
        rms=0.0,
        n_used=10,
    )


def test_hand_eye_noiseless_recovers_truth():
    model, rng, t_rv, t_ed, tip_e, tip_d, q0 = _handeye_setup()
    t_vr_truth = t_rv.inverse()
    pairs = []
    for _ in range(10):
        q = np.clip(q0 + rng.uniform(-0.3, 0.3, 7), model.limits_lower + 0.1, model.limits_upper - 0.1)
        t_re = model.ee_transform(q)
        pairs.append((t_re, t_vr_truth.compose(t_re).compose(t_ed)))
    result = hand_eye_register(pairs, _tip_cal(tip_e, "e", "r"), _tip_cal(tip_d, "d", "v"))
    assert result.fit.rms < 1e-9
    assert rotation_gap_rad(result.fit.transform.rotation, t_vr_truth.rotation) < 1e-9
    assert np.linalg.norm(result.fit.transform.translation - t_vr_truth.translation) < 1e-12
    assert result.fit.transform.from_frame == "r" and result.fit.transform.to_frame == "v"


def test_hand_eye_kinematic_bias_rms_band():
    # Robot-side tip positions off by a few millimetres (kinematic model
    # error): the fit degrades into the observed 3-6 mm band.
    model, rng, t_rv, t_ed, tip_e, tip_d, q0 = _handeye_setup(1)
    t_vr_truth = t_rv.inverse()
    pairs = []
    for _ in range(10):
        q = np.clip(q0 + rng.uniform(-0.3, 0.3, 7), model.limits_lower + 0.1, model.limits_upper - 0.1)
        t_re = model.ee_transform(q)
        err = rng.normal(size=3)
        err = err / np.linalg.norm(err) * rng.uniform(3.5e-3, 5.5e-3)
        t_re_biased = RigidTransform(t_re.rotation, t_re.translation + err, "e", "r")
        pairs.append((t_re_biased, t_vr_truth.compose(t_re).compose(t_ed)))
    result = hand_eye_register(pairs, _tip_cal(tip_e, "e", "r"), _tip_cal(tip_d, "d", "v"))
    assert 3e-3 < result.fit.rms < 6e-3


def test_hand_eye_too_few_poses():
    model, rng, t_rv, t_ed, tip_e, tip_d, q0 = _handeye_setup(2)
    t_re = model.ee_transform(q0)
    pairs = [(t_re, t_rv.inverse().compose(t_re).compose(t_ed))] * 2
    with pytest.raises(TooFewMeasurements):
        hand_eye_register(pairs, _tip_cal(tip_e, "e", "r"), _tip_cal(tip_d, "d", "v"))


def test_landmark_set_validation():
    with pytest.raises(ValueError):
        LandmarkSet(
            landmarks=(Point3([0, 0, 0], "s"), Point3([1, 0, 0], "s")),
            entry=Point3([0, 0, 0], "s"),
            exit=Point3([0, 0, 1], "s"),
        )
    with pytest.raises(ValueError):
        LandmarkSet(
            landmarks=tuple(Point3([float(i), 0, 0], "s") for i in range(3)),
            entry=Point3([0, 0, 0], "s"),
            exit=Point3([0, 0, 0], "s"),
        )
