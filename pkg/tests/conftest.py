import json
from importlib import resources

import numpy as np
import pytest

from drillguide.robot import RobotModel


@pytest.fixture(scope="session")
def robot_config() -> dict:
    path = resources.files("drillguide") / "configs/robot_7dof.json"
    with path.open() as f:
        return json.load(f)


@pytest.fixture(scope="session")
def model(robot_config) -> RobotModel:
    return RobotModel.from_json(robot_config)


@pytest.fixture(scope="session")
def q_ready() -> np.ndarray:
    return np.array([0.0, -np.pi / 4, 0.0, -3 * np.pi / 4, 0.0, np.pi / 2, np.pi / 4])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    from drillguide.geometry import quat_to_matrix

    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def random_transform(rng: np.random.Generator, from_frame="b", to_frame="a", scale=0.5):
    from drillguide.geometry import RigidTransform

    return RigidTransform(
        random_rotation(rng), rng.uniform(-scale, scale, 3), from_frame, to_frame
    )


def rotation_gap_rad(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle between two rotations; atan2 form stays accurate near zero."""
    m = r1 @ r2.T
    sin_vec = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    cos_t = (np.trace(m) - 1.0) / 2.0
    return float(np.arctan2(np.linalg.norm(sin_vec), cos_t))
