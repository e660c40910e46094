"""Virtual drill guide: calibration, registration, control and simulation."""

from .calibration import (
    AxisCalibration,
    CalibrationError,
    CollinearPoints,
    DegenerateMotion,
    EmptyInput,
    LengthMismatch,
    PointCalibration,
    Recording,
    RecordingEntry,
    TooFewMeasurements,
    TransformFit,
    axis_calibrate,
    pivot_calibrate,
    register_transform,
    rms_error,
)
from .controller import (
    ControllerParams,
    ControllerState,
    DrillCalibration,
    JointBufferParams,
    SpringDamperParams,
    VirtualDrillParams,
    buffer_torque,
    controller_step,
    damper_force,
    initialize_state,
    linearize_virtual_drill,
    spring_force,
)
from .energy import AuditResult, EnergyReport, energy_audit, spring_energy
from .geometry import FrameError, GeometryError, Point3, RigidTransform, UnitVec3
from .registration import (
    HandEyeResult,
    LandmarkSet,
    MeasurementFailed,
    RegistrationSession,
    hand_eye_register,
    probe_measure,
)
from .robot import JointState, RobotModel
from .vision import OuterLoopParams, OuterLoopState, VisionFrame, outer_step, safety_check, update_axis, update_offsets

__version__ = "0.1.0"
