import math
from typing import Sequence

import numpy as np
import pytest

from geometry.core import SE3, UnitQuat
from ingest.dataset import CameraTrack, MotionSequence
from synth.writer import write_synthetic_dataset
from utils.config import PipelineConfig


def rot_x(deg: float) -> UnitQuat:
    return UnitQuat.from_axis_angle([1, 0, 0], math.radians(deg))


def rot_y(deg: float) -> UnitQuat:
    return UnitQuat.from_axis_angle([0, 1, 0], math.radians(deg))


def rot_z(deg: float) -> UnitQuat:
    return UnitQuat.from_axis_angle([0, 0, 1], math.radians(deg))


def pinhole(height: int, width: int, focal: float = 50.0) -> np.ndarray:
    return np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


def identity_track(num_frames: int, height: int, width: int, focal: float = 50.0) -> CameraTrack:
    return CameraTrack(pinhole(height, width, focal), tuple(SE3() for _ in range(num_frames)))


def fronto_parallel_grid(height: int, width: int, depth: float, focal: float = 50.0) -> np.ndarray:
    """Points of the plane z = depth seen by an identity camera, one per pixel."""
    dirs = identity_track(1, height, width, focal).ray_directions(height, width)
    return dirs * depth


def motion_from_joints(joints: np.ndarray, fps: float = 30.0) -> MotionSequence:
    """Motion with identity rotations and finite-difference velocities."""
    joints = np.asarray(joints, dtype=np.float64)
    num_frames, num_joints = joints.shape[:2]
    velocity = np.gradient(joints, axis=0) * fps if num_frames > 1 else np.zeros_like(joints)
    quats = np.zeros((num_frames, num_joints, 4))
    quats[..., 0] = 1.0
    root = np.concatenate([quats[:, 0], joints[:, 0]], axis=1)
    return MotionSequence(root, joints, quats, velocity, np.zeros_like(joints))


def still_motion(num_frames: int, pelvis: Sequence[float] = (0.0, 0.0, 0.9), num_joints: int = 3) -> MotionSequence:
    joints = np.zeros((num_frames, num_joints, 3))
    joints[:] = np.asarray(pelvis)
    joints[:, 1:, 2] += np.arange(1, num_joints) * 0.1
    return motion_from_joints(joints)


@pytest.fixture
def config() -> PipelineConfig:
    return PipelineConfig(workers=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def stairs_dir(tmp_path_factory) -> str:
    root = tmp_path_factory.mktemp("stairs")
    write_synthetic_dataset("stairs", str(root), num_frames=12)
    return str(root)


@pytest.fixture(scope="session")
def sit_dir(tmp_path_factory) -> str:
    root = tmp_path_factory.mktemp("sit")
    write_synthetic_dataset("sit", str(root))
    return str(root)
