"""Operator command-line surface: calibration, registration, simulation, audit, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import sim as simmod
from .calibration import (
    CalibrationError,
    PointCalibration,
    Recording,
    axis_calibrate,
    file_sha256,
    pivot_calibrate,
)
from .energy import energy_audit
from .geometry import Point3, RigidTransform, UnitVec3
from .registration import HandEyeResult, LandmarkSet, RegistrationSession, hand_eye_register
from .robot import RobotModel
from .sim import Scenario, ScenarioError, default_scenario, generate_recording, metrics_csv, run_batch
from .trajlog import TrajectoryLog


def _write_json(path: str | None, obj: dict) -> None:
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_scenario(spec: str) -> Scenario:
    if spec == "bundled":
        from importlib import resources

        path = resources.files("drillguide") / "configs/scenario_default.json"
        with path.open() as f:
            return Scenario.from_json(json.load(f))
    return Scenario.load(spec)


def _vec3(text: str) -> np.ndarray:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return np.array(parts)


# -- calib ------------------------------------------------------------------


def cmd_calib_pivot(args) -> int:
    rec = Recording.load_jsonl(args.recording)
    cal = pivot_calibrate(rec, min_singular_value=args.min_singular_value)
    print(f"pivot calibration: rms {cal.rms * 1e3:.4f} mm over {cal.n_used} measurements"
          f" ({cal.n_dropped} dropped)")
    _write_json(args.out, cal.to_json(provenance=file_sha256(args.recording)))
    return 0


def cmd_calib_axis(args) -> int:
    rec = Recording.load_jsonl(args.recording)
    known = Point3(args.known_point, rec.from_frame)
    hint = UnitVec3(args.hint / np.linalg.norm(args.hint), rec.from_frame) if args.hint is not None else None
    cal = axis_calibrate(rec, known, hint=hint, min_sv_ratio=args.min_sv_ratio)
    print(f"axis calibration: rms {cal.rms * 1e3:.4f} mm over {cal.n_used} measurements"
          f" ({cal.n_dropped} dropped)")
    _write_json(args.out, cal.to_json(provenance=file_sha256(args.recording)))
    return 0


# -- register ----------------------------------------------------------------


def _print_histograms(session: RegistrationSession) -> None:
    for idx, hist in session.error_histograms(bin_m=1e-4).items():
        counts = hist["counts"]
        edges = hist["edges_m"]
        print(f"landmark {idx + 1} residuals (0.1 mm bins):")
        for b, count in enumerate(counts):
            if count:
                lo = edges[b] * 1e3
                print(f"  {lo:5.1f}-{lo + 0.1:5.1f} mm | {'#' * count} ({count})")


def _print_fit(session: RegistrationSession) -> None:
    if session.fit is None:
        print("no fit yet (need measurements of >= 3 distinct landmarks)")
    else:
        print(f"registration rms: {session.fit.rms * 1e3:.4f} mm over {session.fit.n_used} measurements")


def cmd_register_bone(args) -> int:
    plan = LandmarkSet.from_json(json.loads(Path(args.plan).read_text()))
    probe_tip = PointCalibration.from_json(json.loads(Path(args.probe_tip).read_text()))
    rec = Recording.load_jsonl(args.probe_recording)
    if rec.from_frame != probe_tip.point_body.frame:
        print(f"error: probe recording is {rec.from_frame!r}->{rec.to_frame!r}, "
              f"tip calibration is in {probe_tip.point_body.frame!r}", file=sys.stderr)
        return 1
    session = RegistrationSession(plan, bone_frame=rec.to_frame)
    entries = list(rec.entries)
    cursor = 0

    def take(landmark: int) -> None:
        nonlocal cursor
        if cursor >= len(entries):
            print("recording exhausted")
            return
        e = entries[cursor]
        cursor += 1
        if not e.valid:
            print("measurement failed (tracker occluded); try again")
            return
        point = e.transform.apply(probe_tip.point_body)
        session.add(landmark, point)
        _print_fit(session)

    if args.auto:
        n_land = len(plan.landmarks)
        for i in range(len(entries)):
            take((i // 5) % n_land)
    else:
        print("commands: measure <landmark#>, undo, rms, hist, done")
        for line in sys.stdin:
            parts = line.split()
            if not parts:
                continue
            cmd = parts[0]
            if cmd == "measure" and len(parts) == 2:
                take(int(parts[1]) - 1)
            elif cmd == "undo":
                if session.measurements:
                    session.undo()
                    print("removed last measurement")
                    _print_fit(session)
                else:
                    print("nothing to undo")
            elif cmd == "rms":
                _print_fit(session)
            elif cmd == "hist":
                _print_histograms(session)
            elif cmd == "done":
                break
            else:
                print(f"unknown command: {line.strip()}")
    _print_fit(session)
    _print_histograms(session)
    if session.fit is None:
        return 1
    if args.session_out:
        session.save(args.session_out)
    _write_json(args.out, session.fit.to_json(provenance=file_sha256(args.probe_recording)))
    return 0


def cmd_register_handeye(args) -> int:
    tip_e = PointCalibration.from_json(json.loads(Path(args.tip_e).read_text()))
    tip_d = PointCalibration.from_json(json.loads(Path(args.tip_d).read_text()))
    pairs = []
    with open(args.pairs) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            pairs.append((RigidTransform.from_json(obj["t_re"]), RigidTransform.from_json(obj["t_vd"])))
    result: HandEyeResult = hand_eye_register(pairs, tip_e, tip_d)
    print(f"hand-eye registration: rms {result.fit.rms * 1e3:.3f} mm over {result.n_poses} poses")
    _write_json(args.out, result.fit.to_json(provenance=file_sha256(args.pairs)))
    return 0


# -- simulate / audit / serve -------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = _load_scenario(args.scenario)
    if args.seed is not None:
        scenario = simmod.Scenario.from_json({**scenario.to_json(), "seed": args.seed})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_batch(scenario, args.trials)
    (out_dir / "metrics.csv").write_text(metrics_csv(results, scenario))
    if args.save_logs:
        for i, r in enumerate(results):
            r.log.save_csv(out_dir / f"trial_{i:03d}.csv")
    summary = {
        "trials": args.trials,
        "seed": scenario.seed,
        "mean_entry_mm": float(np.mean([r.metrics.entry_translation_err_mm for r in results])),
        "mean_exit_mm": float(np.mean([r.metrics.exit_translation_err_mm for r in results])),
        "mean_angle_deg": float(np.mean([r.metrics.angular_deviation_deg for r in results])),
        "terminated_early": int(sum(r.metrics.terminated_early for r in results)),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{args.trials} trials -> {out_dir / 'metrics.csv'}")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_audit(args) -> int:
    scenario = _load_scenario(args.scenario)
    log = TrajectoryLog.load_csv(args.log)
    model = RobotModel.from_json(scenario.robot_config)
    result = energy_audit(
        log,
        scenario.controller,
        model.limits_lower,
        model.limits_upper,
        k_i=scenario.outer.k_i,
        outer_rate_hz=scenario.outer.rate_hz,
    )
    report = result.to_json()
    print(f"energy audit over {report['steps']} steps ({report['duration_s']:.3f} s):")
    print(f"  max |residual|      {report['max_abs_residual_j']:.3e} J/step")
    print(f"  net residual rate   {report['net_residual_rate_jps']:.3e} J/s")
    print(f"  max energy increase {report['max_energy_increase_j']:.3e} J/step")
    print(f"  offset power bound  {'OK' if report['offset_power_bound_ok'] else 'VIOLATED'}")
    _write_json(args.out, report)
    if args.residuals_out:
        with open(args.residuals_out, "w") as f:
            f.write("t,residual_j,offset_power_w,offset_power_bound_w\n")
            for i, r in enumerate(result.residuals):
                f.write(
                    f"{repr(float(log.t[i]))},{repr(float(r))},"
                    f"{repr(float(result.offset_power[i]))},{repr(float(result.offset_power_bound[i]))}\n"
                )
    return 0


def cmd_serve(args) -> int:
    from .server import SimServer

    scenario = _load_scenario(args.scenario)
    server = SimServer(scenario, host=args.host, port=args.port, speed=args.speed)
    print(f"serving live simulation on ws://{args.host}:{args.port} (Ctrl-C to stop)")
    try:
        server.run()
    except OSError as e:
        print(f"error: cannot bind {args.host}:{args.port}: {e}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    model = None
    if args.kind == "handeye":
        model = RobotModel.from_json(simmod.load_bundled_robot_config())
    out = generate_recording(args.kind, sigma_m=args.sigma_mm * 1e-3, seed=args.seed, n=args.n, model=model)
    out.recording.save_jsonl(args.out)
    print(f"wrote {len(out.recording.entries)} measurements to {args.out}")
    for name, rec in out.extra.items():
        path = Path(args.out).with_suffix(f".{name}.jsonl")
        rec.save_jsonl(path)
        print(f"wrote companion stream {name} to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drillguide", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    calib = sub.add_parser("calib", help="best-fit tool calibrations from recordings")
    calib_sub = calib.add_subparsers(dest="kind", required=True)
    cp = calib_sub.add_parser("pivot", help="fixed-point (tool tip) calibration")
    cp.add_argument("recording", help="JSONL recording of pivoting transforms")
    cp.add_argument("--out", help="write calibration JSON here (default: stdout)")
    cp.add_argument("--min-singular-value", type=float, default=1e-8)
    cp.set_defaults(func=cmd_calib_pivot)
    ca = calib_sub.add_parser("axis", help="tool axis calibration")
    ca.add_argument("recording")
    ca.add_argument("--known-point", type=_vec3, required=True, help="calibrated tip x,y,z (m, body frame)")
    ca.add_argument("--hint", type=_vec3, default=None, help="axis sign hint direction (body frame)")
    ca.add_argument("--min-sv-ratio", type=float, default=3.0)
    ca.add_argument("--out")
    ca.set_defaults(func=cmd_calib_axis)

    reg = sub.add_parser("register", help="bone and hand-eye registration")
    reg_sub = reg.add_subparsers(dest="kind", required=True)
    rb = reg_sub.add_parser("bone", help="landmark-probing session (interactive or --auto)")
    rb.add_argument("--plan", required=True, help="landmark set JSON (scan frame)")
    rb.add_argument("--probe-recording", required=True, help="JSONL of probe poses in the bone-tracker frame")
    rb.add_argument("--probe-tip", required=True, help="probe tip calibration JSON")
    rb.add_argument("--auto", action="store_true", help="consume the whole recording with the 5-per-round protocol")
    rb.add_argument("--out")
    rb.add_argument("--session-out", help="also persist the full session JSON")
    rb.set_defaults(func=cmd_register_bone)
    rh = reg_sub.add_parser("handeye", help="robot-to-vision registration from paired poses")
    rh.add_argument("--pairs", required=True, help="JSONL lines {t_re: .., t_vd: ..}")
    rh.add_argument("--tip-e", required=True, help="drill tip calibration in the end-effector frame")
    rh.add_argument("--tip-d", required=True, help="drill tip calibration in the drill-tracker frame")
    rh.add_argument("--out")
    rh.set_defaults(func=cmd_register_handeye)

    sm = sub.add_parser("simulate", help="run drilling trials and write metrics")
    sm.add_argument("scenario", help="scenario JSON path, or 'bundled'")
    sm.add_argument("--trials", type=int, default=1)
    sm.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sm.add_argument("--out", required=True, help="output directory")
    sm.add_argument("--save-logs", action="store_true", help="also write per-trial trajectory CSVs")
    sm.set_defaults(func=cmd_simulate)

    au = sub.add_parser("audit", help="passivity/energy audit of a trajectory log")
    au.add_argument("log", help="trajectory CSV from simulate --save-logs")
    au.add_argument("--scenario", default="bundled")
    au.add_argument("--out")
    au.add_argument("--residuals-out", help="write per-step residual CSV")
    au.set_defaults(func=cmd_audit)

    sv = sub.add_parser("serve", help="live simulation with a websocket state/command endpoint")
    sv.add_argument("scenario")
    sv.add_argument("--port", type=int, default=8765)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--speed", type=float, default=1.0, help="sim-time over wall-time ratio")
    sv.set_defaults(func=cmd_serve)

    sy = sub.add_parser("synth", help="generate synthetic recordings for the solvers")
    sy.add_argument("kind", choices=["pivot", "axis", "landmarks", "handeye"])
    sy.add_argument("--out", required=True)
    sy.add_argument("--sigma-mm", type=float, default=0.0, help="translation noise (RMS of vector norm)")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--n", type=int, default=600)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CalibrationError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
