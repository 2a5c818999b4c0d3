import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from geometry.core import quat_angle, quat_canonical, quat_conjugate, quat_rotate, quat_sub_array
from ingest.dataset import MotionSequence
from utils.errors import LengthMismatch


TERMINATION_DISTANCE = 0.5
FIRST_FRAME_PROBABILITY = 0.1
JOINT_FEATURE_WIDTH = 14


@dataclass(frozen=True)
class RewardWeights:
    w_p: float = 2.5
    w_r: float = 1.5
    w_v: float = 0.5
    w_omega: float = 0.5
    w_h: float = 1.0
    w_e: float = 0.001
    alpha_p: float = 1.5
    alpha_r: float = 0.3
    alpha_v: float = 0.12
    alpha_omega: float = 0.05
    alpha_h: float = 20.0

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"Reward weight {name} must be non-negative, got {value}")

    @property
    def max_reward(self) -> float:
        return self.w_p + self.w_r + self.w_v + self.w_omega + self.w_h


@dataclass(frozen=True, eq=False)
class SimState:
    """One frame of a humanoid: global joint quantities plus the root pose."""

    root_rotation: NDArray  # (4,) wxyz
    root_position: NDArray  # (3,)
    joint_positions: NDArray  # (J, 3)
    joint_rotations: NDArray  # (J, 4)
    linear_velocity: NDArray  # (J, 3)
    angular_velocity: NDArray  # (J, 3)

    @property
    def root_height(self) -> float:
        return float(self.root_position[2])

    @property
    def num_joints(self) -> int:
        return len(self.joint_positions)

    @classmethod
    def from_motion(cls, motion: MotionSequence, t: int) -> "SimState":
        return cls(
            root_rotation=motion.root_pose[t, :4],
            root_position=motion.root_pose[t, 4:],
            joint_positions=motion.joint_positions[t],
            joint_rotations=motion.joint_rotations[t],
            linear_velocity=motion.linear_velocity[t],
            angular_velocity=motion.angular_velocity[t],
        )


def _check_joints(sim: SimState, ref: SimState) -> None:
    if sim.num_joints != ref.num_joints:
        raise LengthMismatch(f"Simulated state has {sim.num_joints} joints, reference has {ref.num_joints}")


def tracking_reward(
    sim: SimState,
    ref: SimState,
    torques: Optional[ArrayLike] = None,
    joint_velocities: Optional[ArrayLike] = None,
    weights: RewardWeights = RewardWeights(),
    energy_sign: str = "penalty",
) -> float:
    """Imitation reward of ``sim`` against reference ``ref``.

    Position and velocity errors are norms over the stacked joints; the rotation
    error is the norm of the per-joint relative rotation angles. The energy term
    sum_j |tau_j * qdot_j| is subtracted; ``energy_sign="printed"`` adds it instead.
    """
    _check_joints(sim, ref)
    w = weights
    pos_err = float(np.linalg.norm(ref.joint_positions - sim.joint_positions))
    rot_err = float(np.linalg.norm(quat_angle(quat_sub_array(ref.joint_rotations, sim.joint_rotations))))
    vel_err = float(np.linalg.norm(ref.linear_velocity - sim.linear_velocity))
    ang_err = float(np.linalg.norm(ref.angular_velocity - sim.angular_velocity))
    height_err = abs(ref.root_height - sim.root_height)

    reward = (
        w.w_p * math.exp(-w.alpha_p * pos_err)
        + w.w_r * math.exp(-w.alpha_r * rot_err)
        + w.w_v * math.exp(-w.alpha_v * vel_err)
        + w.w_omega * math.exp(-w.alpha_omega * ang_err)
        + w.w_h * math.exp(-w.alpha_h * height_err)
    )
    if torques is not None and joint_velocities is not None:
        tau = np.asarray(torques, dtype=np.float64).reshape(sim.num_joints, -1)
        qdot = np.asarray(joint_velocities, dtype=np.float64).reshape(tau.shape)
        energy = float(np.linalg.norm(tau * qdot, axis=1).sum())
        reward += (1.0 if energy_sign == "printed" else -1.0) * w.w_e * energy
    return reward


def _to_root_frame(root_rotation: NDArray, vectors: NDArray) -> NDArray:
    inverse = np.broadcast_to(quat_conjugate(root_rotation), vectors.shape[:-1] + (4,))
    return quat_rotate(inverse, vectors)


def featurize(sim: SimState, targets: Sequence[SimState]) -> Tuple[NDArray, NDArray]:
    """Proprioception ``s`` and target features ``g`` in the root frame.

    Layout of ``s`` per joint j: relative rotation theta_j - theta_root (4),
    root-frame position p_j - p_root (3), root-frame linear velocity (3),
    root-frame angular velocity (3); joints are concatenated in order.

    Layout of ``g`` per target and joint: target rotation minus current rotation
    (4), target rotation minus root rotation (4), root-frame p_hat_j - p_j (3),
    root-frame p_hat_j - p_root (3); 14 values per joint, targets concatenated in
    order.
    """
    if not targets:
        raise ValueError("featurize needs at least one target frame")
    root_q = quat_canonical(sim.root_rotation)
    root_p = sim.root_position
    joints = sim.num_joints
    root_stack = np.broadcast_to(root_q, (joints, 4))

    state = np.concatenate(
        [
            quat_sub_array(sim.joint_rotations, root_stack),
            _to_root_frame(root_q, sim.joint_positions - root_p),
            _to_root_frame(root_q, sim.linear_velocity),
            _to_root_frame(root_q, sim.angular_velocity),
        ],
        axis=1,
    ).reshape(-1)

    goals = []
    for target in targets:
        _check_joints(sim, target)
        goals.append(
            np.concatenate(
                [
                    quat_sub_array(target.joint_rotations, sim.joint_rotations),
                    quat_sub_array(target.joint_rotations, root_stack),
                    _to_root_frame(root_q, target.joint_positions - sim.joint_positions),
                    _to_root_frame(root_q, target.joint_positions - root_p),
                ],
                axis=1,
            ).reshape(-1)
        )
    return state, np.concatenate(goals)


def early_termination_check(sim_joints: ArrayLike, ref_joints: ArrayLike, threshold: float = TERMINATION_DISTANCE) -> bool:
    sim = np.asarray(sim_joints, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref_joints, dtype=np.float64).reshape(-1, 3)
    if sim.shape != ref.shape:
        raise LengthMismatch(f"Joint sets differ: {sim.shape} vs {ref.shape}")
    return bool(np.max(np.linalg.norm(sim - ref, axis=1)) > threshold)


def _check_motions(sim: MotionSequence, ref: MotionSequence) -> None:
    if sim.num_frames != ref.num_frames or sim.num_joints != ref.num_joints:
        raise LengthMismatch(
            f"Motion shapes differ: {sim.num_frames}x{sim.num_joints} vs {ref.num_frames}x{ref.num_joints}"
        )


def termination_flags(sim: MotionSequence, ref: MotionSequence, threshold: float = TERMINATION_DISTANCE) -> NDArray:
    """Per-frame early-termination outcome of ``sim`` against ``ref``."""
    _check_motions(sim, ref)
    gap = np.linalg.norm(sim.joint_positions - ref.joint_positions, axis=-1)
    return np.max(gap, axis=1) > threshold


def reward_trace(
    sim: MotionSequence,
    ref: MotionSequence,
    weights: RewardWeights = RewardWeights(),
    torques: Optional[ArrayLike] = None,
    energy_sign: str = "penalty",
) -> Tuple[List[float], Optional[int]]:
    """Per-frame reward of a whole motion against its reference, and the first
    frame at which tracking would have been terminated (None if never).

    ``torques`` holds one (J, 3) torque set per frame; the joint angular
    velocities of ``sim`` pair with it in the energy term.
    """
    _check_motions(sim, ref)
    tau = None
    if torques is not None:
        tau = np.asarray(torques, dtype=np.float64)
        if tau.shape != sim.angular_velocity.shape:
            raise LengthMismatch(f"Torques {tau.shape} do not match motion {sim.angular_velocity.shape}")
    rewards = []
    for t in range(sim.num_frames):
        rewards.append(
            tracking_reward(
                SimState.from_motion(sim, t),
                SimState.from_motion(ref, t),
                None if tau is None else tau[t],
                None if tau is None else sim.angular_velocity[t],
                weights,
                energy_sign,
            )
        )
    failed = np.flatnonzero(termination_flags(sim, ref))
    return rewards, int(failed[0]) if failed.size else None


def sample_reference_start(num_frames: int, rng: np.random.Generator, p_first: float = FIRST_FRAME_PROBABILITY) -> int:
    """Episode start frame: the first frame with probability ``p_first``, else uniform."""
    if num_frames < 1:
        raise LengthMismatch("Reference motion has no frames")
    if rng.random() < p_first:
        return 0
    return int(rng.integers(num_frames))


@dataclass(frozen=True)
class Episode:
    start: int
    length: int
    total_reward: float


def rollout_episodes(
    rewards: Sequence[float],
    failed: ArrayLike,
    episodes: int,
    rng: np.random.Generator,
    p_first: float = FIRST_FRAME_PROBABILITY,
) -> List[Episode]:
    """Replay tracking episodes over a scored trace from sampled reference starts.

    An episode runs from its start through the first failed frame, or to the end
    of the trace.
    """
    failed = np.asarray(failed, dtype=bool)
    if len(failed) != len(rewards):
        raise LengthMismatch(f"{len(rewards)} rewards but {len(failed)} termination flags")
    played = []
    for _ in range(episodes):
        start = sample_reference_start(len(rewards), rng, p_first)
        hit = np.flatnonzero(failed[start:])
        stop = start + int(hit[0]) + 1 if hit.size else len(rewards)
        played.append(Episode(start, stop - start, float(np.sum(rewards[start:stop]))))
    return played
