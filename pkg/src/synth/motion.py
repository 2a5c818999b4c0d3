import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from ingest.dataset import ContactPoint, ContactSequence, MotionSequence
from synth.scenes import SceneSpec
from utils.errors import ScenarioMismatch


JOINT_NAMES = (
    "pelvis",
    "chest",
    "head",
    "left_knee",
    "right_knee",
    "left_foot",
    "right_foot",
    "left_hand",
    "right_hand",
)

# Joint offsets from the pelvis in the body frame: x right, y forward, z up.
STANDING_POSE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.45],
        [0.0, 0.0, 0.75],
        [-0.1, 0.0, -0.45],
        [0.1, 0.0, -0.45],
        [-0.1, 0.0, -0.85],
        [0.1, 0.0, -0.85],
        [-0.25, 0.0, 0.0],
        [0.25, 0.0, 0.0],
    ]
)
SEATED_POSE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, -0.05, 0.4],
        [0.0, -0.05, 0.7],
        [-0.1, 0.35, -0.05],
        [0.1, 0.35, -0.05],
        [-0.1, 0.4, -0.5],
        [0.1, 0.4, -0.5],
        [-0.15, 0.25, 0.0],
        [0.15, 0.25, 0.0],
    ]
)
STANDING_PELVIS_HEIGHT = 0.85
SEATED_PELVIS_CLEARANCE = 0.10

CONTACT_VERTICES: Dict[str, int] = {
    "left_sole": 0,
    "right_sole": 1,
    "left_buttock_back": 2,
    "right_buttock_back": 3,
    "left_buttock_front": 4,
    "right_buttock_front": 5,
    "left_thigh_mid": 6,
    "right_thigh_mid": 7,
    "left_thigh_front": 8,
    "right_thigh_front": 9,
}
# Seated contact vertices, body frame relative to the pelvis; z is filled in from the seat.
SEATED_CONTACTS = {
    "left_buttock_back": (-0.08, -0.05),
    "right_buttock_back": (0.08, -0.05),
    "left_buttock_front": (-0.08, 0.05),
    "right_buttock_front": (0.08, 0.05),
    "left_thigh_mid": (-0.1, 0.15),
    "right_thigh_mid": (0.1, 0.15),
    "left_thigh_front": (-0.1, 0.25),
    "right_thigh_front": (0.1, 0.25),
}

WALK_SPEED = 1.2
STEP_FRAMES = 8
HIGH_CONFIDENCE = 0.9
LOW_CONFIDENCE = 0.2
RESTING_CONFIDENCE = 0.3
PROXY_MARGIN = 0.12


@dataclass(frozen=True, eq=False)
class ScriptedMotion:
    motion: MotionSequence
    contacts: ContactSequence
    human_boxes: NDArray  # (T, 2, 3) axis-aligned body proxy, min and max corner


def yaw_quaternion(yaw: NDArray) -> NDArray:
    yaw = np.asarray(yaw, dtype=np.float64)
    return np.stack([np.cos(yaw / 2), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(yaw / 2)], axis=-1)


def rotate_yaw(offsets: NDArray, yaw: float) -> NDArray:
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(offsets) @ rot.T


def assemble_motion(pelvis: NDArray, yaw: NDArray, poses: NDArray, fps: float) -> MotionSequence:
    """Motion record from a pelvis path, heading and per-frame body-frame pose."""
    num_frames, num_joints = poses.shape[:2]
    joints = np.stack([pelvis[t] + rotate_yaw(poses[t], yaw[t]) for t in range(num_frames)])
    quats = yaw_quaternion(yaw)
    velocity = np.gradient(joints, axis=0) * fps if num_frames > 1 else np.zeros_like(joints)
    yaw_rate = np.gradient(np.unwrap(yaw)) * fps if num_frames > 1 else np.zeros(num_frames)
    angular = np.zeros_like(joints)
    angular[..., 2] = yaw_rate[:, None]
    return MotionSequence(
        root_pose=np.concatenate([quats, pelvis], axis=1),
        joint_positions=joints,
        joint_rotations=np.repeat(quats[:, None, :], num_joints, axis=1),
        linear_velocity=velocity,
        angular_velocity=angular,
    )


def human_boxes(motion: MotionSequence, margin: float = PROXY_MARGIN) -> NDArray:
    lo = motion.joint_positions.min(axis=1) - margin
    hi = motion.joint_positions.max(axis=1) + margin
    return np.stack([lo, hi], axis=1)


def _sole(motion: MotionSequence, t: int, side: str, ground: float, confidence: float) -> ContactPoint:
    joint = JOINT_NAMES.index(f"{side}_foot")
    x, y, _ = motion.joint_positions[t, joint]
    return ContactPoint(CONTACT_VERTICES[f"{side}_sole"], confidence, (float(x), float(y), float(ground)))


def _gait(t: int) -> Tuple[float, float]:
    """Alternating stance confidence of (left, right) foot."""
    left_down = (t // STEP_FRAMES) % 2 == 0
    return (HIGH_CONFIDENCE, LOW_CONFIDENCE) if left_down else (LOW_CONFIDENCE, HIGH_CONFIDENCE)


def _finish(pelvis: NDArray, yaw: NDArray, poses: NDArray, frames: List[Tuple[ContactPoint, ...]], fps: float, motion=None) -> ScriptedMotion:
    if motion is None:
        motion = assemble_motion(pelvis, yaw, poses, fps)
    contacts = ContactSequence(tuple(frames), motion.body_speed(), motion.pelvis)
    return ScriptedMotion(motion, contacts, human_boxes(motion))


def walk_script(spec: SceneSpec, fps: float, start=(-1.0, -0.45), end=(1.0, -0.45)) -> ScriptedMotion:
    """Back-and-forth walk at constant speed between two floor points."""
    num_frames = spec.num_frames
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    length = float(np.linalg.norm(end - start))
    travelled = WALK_SPEED * np.arange(num_frames) / fps
    phase = np.mod(travelled, 2 * length)
    along = np.where(phase <= length, phase, 2 * length - phase) / length
    xy = start + along[:, None] * (end - start)
    pelvis = np.column_stack([xy, np.full(num_frames, STANDING_PELVIS_HEIGHT)])
    heading = math.atan2(end[1] - start[1], end[0] - start[0]) - math.pi / 2
    yaw = np.full(num_frames, heading)
    poses = np.repeat(STANDING_POSE[None], num_frames, axis=0)
    motion = assemble_motion(pelvis, yaw, poses, fps)
    frames = []
    for t in range(num_frames):
        left, right = _gait(t)
        frames.append((_sole(motion, t, "left", 0.0, left), _sole(motion, t, "right", 0.0, right)))
    return _finish(pelvis, yaw, poses, frames, fps, motion)


def sit_script(spec: SceneSpec, fps: float, window: int = 15) -> ScriptedMotion:
    """Walk up to the chair, sit still for a while, stand and walk off.

    The seated dwell lasts at least twice ``window`` frames with buttock and
    thigh vertices confident on the seat plane and the body at rest.
    """
    seats = spec.indices("seat")
    if not seats:
        raise ScenarioMismatch("The sit scenario needs a primitive labelled 'seat'")
    seat = spec.primitives[seats[0]]
    face = seat.center - seat.half_extents[2] * seat.normal
    seat_height = float(face[2])

    approach, lower, rise = 24, 12, 10
    dwell = max(2 * window + 10, 40)
    leave = spec.num_frames - (approach + lower + dwell + rise)
    if leave < 0:
        raise ScenarioMismatch(
            f"The sit scenario needs at least {approach + lower + dwell + rise} frames, got {spec.num_frames}"
        )

    yaw_seated = math.pi
    seated = np.array([face[0], face[1] + 0.05, seat_height + SEATED_PELVIS_CLEARANCE])
    stand = np.array([face[0], face[1] - 0.35, STANDING_PELVIS_HEIGHT])
    arrive_from = stand + np.array([-1.5, -0.3, 0.0])
    depart_to = stand + np.array([1.5, -0.3, 0.0])

    pelvis, poses, phases = [], [], []

    def segment(a: NDArray, b: NDArray, pose_a: NDArray, pose_b: NDArray, count: int, name: str) -> None:
        for k in range(count):
            s = k / count
            pelvis.append((1 - s) * a + s * b)
            poses.append((1 - s) * pose_a + s * pose_b)
            phases.append(name)

    segment(arrive_from, stand, STANDING_POSE, STANDING_POSE, approach, "walk")
    segment(stand, seated, STANDING_POSE, SEATED_POSE, lower, "transition")
    segment(seated, seated, SEATED_POSE, SEATED_POSE, dwell, "seated")
    segment(seated, stand, SEATED_POSE, STANDING_POSE, rise, "transition")
    segment(stand, depart_to, STANDING_POSE, STANDING_POSE, leave, "walk")

    pelvis_arr = np.array(pelvis)
    poses_arr = np.array(poses)
    yaw = np.full(len(pelvis), yaw_seated)
    motion = assemble_motion(pelvis_arr, yaw, poses_arr, fps)

    frames = []
    for t, phase in enumerate(phases):
        if phase == "seated":
            contact = [
                ContactPoint(
                    CONTACT_VERTICES[name],
                    HIGH_CONFIDENCE,
                    tuple(float(v) for v in pelvis_arr[t] + rotate_yaw(np.array([dx, dy, 0.0]), yaw_seated) - [0.0, 0.0, SEATED_PELVIS_CLEARANCE]),
                )
                for name, (dx, dy) in SEATED_CONTACTS.items()
            ]
            contact.append(_sole(motion, t, "left", 0.0, RESTING_CONFIDENCE))
            contact.append(_sole(motion, t, "right", 0.0, RESTING_CONFIDENCE))
            frames.append(tuple(contact))
        elif phase == "transition":
            frames.append((_sole(motion, t, "left", 0.0, HIGH_CONFIDENCE), _sole(motion, t, "right", 0.0, HIGH_CONFIDENCE)))
        else:
            left, right = _gait(t)
            frames.append((_sole(motion, t, "left", 0.0, left), _sole(motion, t, "right", 0.0, right)))
    return _finish(pelvis_arr, yaw, poses_arr, frames, fps, motion)


def stairs_script(spec: SceneSpec, fps: float) -> ScriptedMotion:
    """Climb the flight one tread per step, landing feet alternately on each tread."""
    treads = spec.indices("tread")
    if not treads:
        raise ScenarioMismatch("The stairs scenario needs primitives labelled 'tread'")
    faces = []
    for index in treads:
        prim = spec.primitives[index]
        faces.append(prim.center - prim.half_extents[2] * prim.normal)
    faces.sort(key=lambda c: c[2])

    num_frames = spec.num_frames
    approach = max(1, num_frames // 6)
    per_step = max(1, (num_frames - approach) // len(faces))
    first = faces[0]
    start = np.array([first[0], first[1] - 1.4, STANDING_PELVIS_HEIGHT])
    foot_of_flight = np.array([first[0], first[1] - 0.6, STANDING_PELVIS_HEIGHT])
    waypoints = [start, foot_of_flight] + [face + [0.0, 0.0, STANDING_PELVIS_HEIGHT] for face in faces]
    counts = [approach] + [per_step] * len(faces)
    counts[-1] += num_frames - sum(counts)

    pelvis, support = [], []
    for leg, count in enumerate(counts):
        a, b = waypoints[leg], waypoints[leg + 1]
        for k in range(count):
            s = (k + 1) / count
            pelvis.append((1 - s) * a + s * b)
            support.append(leg - 1)  # -1: still on the floor
    pelvis_arr = np.array(pelvis)
    yaw = np.zeros(num_frames)
    poses = np.repeat(STANDING_POSE[None], num_frames, axis=0)
    motion = assemble_motion(pelvis_arr, yaw, poses, fps)

    frames = []
    for t, step in enumerate(support):
        if step < 0:
            left, right = _gait(t)
            frames.append((_sole(motion, t, "left", 0.0, left), _sole(motion, t, "right", 0.0, right)))
            continue
        face = faces[step]
        lead = "left" if step % 2 == 0 else "right"
        trail = "right" if lead == "left" else "left"
        trail_height = float(faces[step - 1][2]) if step > 0 else 0.0
        lead_x = face[0] + (-0.1 if lead == "left" else 0.1)
        frames.append(
            (
                ContactPoint(CONTACT_VERTICES[f"{lead}_sole"], HIGH_CONFIDENCE, (float(lead_x), float(face[1]), float(face[2]))),
                _sole(motion, t, trail, trail_height, RESTING_CONFIDENCE),
            )
        )
    return _finish(pelvis_arr, yaw, poses, frames, fps, motion)


def synth_motion_and_contacts(spec: SceneSpec, scenario: str, fps: float = 30.0, window: int = 15) -> ScriptedMotion:
    if scenario in ("walk", "room"):
        if not spec.indices("ground"):
            raise ScenarioMismatch("The walk scenario needs a primitive labelled 'ground'")
        return walk_script(spec, fps)
    if scenario == "sit":
        return sit_script(spec, fps, window)
    if scenario == "stairs":
        return stairs_script(spec, fps)
    raise ScenarioMismatch(f"Unknown scenario {scenario!r}")
