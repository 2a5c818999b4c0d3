import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from geometry.core import SE3
from utils.errors import ManifestParse, NonFiniteData, ShapeMismatch


MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "crisp-dataset"
FORMAT_VERSION = 1
MOTION_ROOT_WIDTH = 7
MOTION_JOINT_WIDTH = 13


def _frozen(array: NDArray) -> NDArray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointMapSequence:
    points: NDArray  # (T, H, W, 3) world frame, metres
    valid: NDArray  # (T, H, W) bool
    filters_applied: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        points = np.asarray(self.points)
        valid = np.asarray(self.valid, dtype=bool)
        if points.ndim != 4 or points.shape[-1] != 3:
            raise ShapeMismatch(f"Point maps must be (T, H, W, 3), got {points.shape}")
        if valid.shape != points.shape[:3]:
            raise ShapeMismatch(f"Validity mask {valid.shape} does not match points {points.shape[:3]}")
        if points.shape[0] < 1:
            raise ShapeMismatch("Point map sequence has no frames")
        if not np.all(np.isfinite(points[valid])):
            raise NonFiniteData("Valid point-map entries contain NaN or inf")
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "valid", _frozen(valid))
        object.__setattr__(self, "filters_applied", tuple(self.filters_applied))

    @property
    def num_frames(self) -> int:
        return self.points.shape[0]

    @property
    def height(self) -> int:
        return self.points.shape[1]

    @property
    def width(self) -> int:
        return self.points.shape[2]

    def frame_points(self, t: int) -> NDArray[np.float64]:
        return self.points[t].astype(np.float64)

    def with_valid(self, valid: NDArray, tag: Optional[str] = None) -> "PointMapSequence":
        applied = self.filters_applied + ((tag,) if tag else ())
        return PointMapSequence(self.points, valid, applied)


@dataclass(frozen=True, eq=False)
class FlowField:
    source: int
    target: int
    flow: NDArray  # (H, W, 2) pixel displacement (du, dv)
    covisibility: NDArray  # (H, W) bool, indexed by source pixel

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise ShapeMismatch(f"Flow field must join distinct frames, got {self.source} -> {self.target}")
        flow = np.asarray(self.flow)
        covis = np.asarray(self.covisibility, dtype=bool)
        if flow.ndim != 3 or flow.shape[-1] != 2 or covis.shape != flow.shape[:2]:
            raise ShapeMismatch(f"Flow {flow.shape} / covisibility {covis.shape} shapes disagree")
        if not np.all(np.isfinite(flow[covis])):
            raise NonFiniteData(f"Flow {self.source}->{self.target} has non-finite covisible entries")
        object.__setattr__(self, "flow", _frozen(flow))
        object.__setattr__(self, "covisibility", _frozen(covis))


@dataclass(frozen=True, eq=False)
class MotionSequence:
    root_pose: NDArray  # (T, 7) quat wxyz + translation
    joint_positions: NDArray  # (T, J, 3)
    joint_rotations: NDArray  # (T, J, 4)
    linear_velocity: NDArray  # (T, J, 3)
    angular_velocity: NDArray  # (T, J, 3)

    def __post_init__(self) -> None:
        arrays = {
            "root_pose": np.asarray(self.root_pose, dtype=np.float64),
            "joint_positions": np.asarray(self.joint_positions, dtype=np.float64),
            "joint_rotations": np.asarray(self.joint_rotations, dtype=np.float64),
            "linear_velocity": np.asarray(self.linear_velocity, dtype=np.float64),
            "angular_velocity": np.asarray(self.angular_velocity, dtype=np.float64),
        }
        num_frames, num_joints = arrays["joint_positions"].shape[:2]
        expected = {
            "root_pose": (num_frames, 7),
            "joint_positions": (num_frames, num_joints, 3),
            "joint_rotations": (num_frames, num_joints, 4),
            "linear_velocity": (num_frames, num_joints, 3),
            "angular_velocity": (num_frames, num_joints, 3),
        }
        for name, array in arrays.items():
            if array.shape != expected[name]:
                raise ShapeMismatch(f"Motion {name} has shape {array.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(array)):
                raise NonFiniteData(f"Motion {name} contains NaN or inf")
            object.__setattr__(self, name, _frozen(array))
        if num_joints < 1:
            raise ShapeMismatch("Motion must have at least one joint")

    @property
    def num_frames(self) -> int:
        return self.joint_positions.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_positions.shape[1]

    @property
    def pelvis(self) -> NDArray[np.float64]:
        return self.joint_positions[:, 0]

    @property
    def root_height(self) -> NDArray[np.float64]:
        return self.joint_positions[:, 0, 2]

    def body_speed(self) -> NDArray[np.float64]:
        """Per-frame mean joint linear speed, m/s."""
        return np.linalg.norm(self.linear_velocity, axis=-1).mean(axis=1)


@dataclass(frozen=True)
class ContactPoint:
    vertex_id: int
    confidence: float
    position: Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class ContactSequence:
    frames: Tuple[Tuple[ContactPoint, ...], ...]
    body_speed: NDArray  # (T,) m/s
    pelvis: Optional[NDArray] = None  # (T, 3)

    def __post_init__(self) -> None:
        frames = tuple(tuple(frame) for frame in self.frames)
        speed = np.asarray(self.body_speed, dtype=np.float64)
        if speed.shape != (len(frames),):
            raise ShapeMismatch(f"Body speed has shape {speed.shape}, expected ({len(frames)},)")
        if not np.all(np.isfinite(speed)):
            raise NonFiniteData("Body speed contains NaN or inf")
        for t, frame in enumerate(frames):
            for contact in frame:
                if not 0.0 <= contact.confidence <= 1.0:
                    raise ManifestParse(f"Frame {t}: contact confidence {contact.confidence} outside [0, 1]")
                if not np.all(np.isfinite(contact.position)):
                    raise NonFiniteData(f"Frame {t}: contact vertex {contact.vertex_id} has non-finite position")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "body_speed", _frozen(speed))
        if self.pelvis is not None:
            pelvis = np.asarray(self.pelvis, dtype=np.float64)
            if pelvis.shape != (len(frames), 3):
                raise ShapeMismatch(f"Pelvis track has shape {pelvis.shape}")
            object.__setattr__(self, "pelvis", _frozen(pelvis))

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def max_confidence(self) -> NDArray[np.float64]:
        return np.array([max((c.confidence for c in frame), default=0.0) for frame in self.frames])


@dataclass(frozen=True, eq=False)
class CameraTrack:
    intrinsics: NDArray  # (3, 3)
    poses: Tuple[SE3, ...]  # camera-to-world, OpenCV axes (x right, y down, z forward)

    def __post_init__(self) -> None:
        k = np.asarray(self.intrinsics, dtype=np.float64)
        if k.shape != (3, 3):
            raise ShapeMismatch(f"Intrinsics must be 3x3, got {k.shape}")
        if not np.all(np.isfinite(k)):
            raise NonFiniteData("Intrinsics contain NaN or inf")
        if np.any(np.tril(k, -1) != 0) or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ManifestParse("Intrinsics must be upper-triangular with positive focal lengths")
        object.__setattr__(self, "intrinsics", _frozen(k))
        object.__setattr__(self, "poses", tuple(self.poses))

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def center(self, t: int) -> NDArray[np.float64]:
        return self.poses[t].translation

    def to_camera(self, points: NDArray, t: int) -> NDArray[np.float64]:
        return self.poses[t].inverse().apply(np.asarray(points, dtype=np.float64))

    def depth(self, points: NDArray, t: int) -> NDArray[np.float64]:
        return self.to_camera(points, t)[..., 2]

    def project(self, points: NDArray, t: int) -> Tuple[NDArray, NDArray, NDArray]:
        cam = self.to_camera(points, t)
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics[0, 0] * cam[..., 0] / z + self.intrinsics[0, 1] * cam[..., 1] / z + self.intrinsics[0, 2]
            v = self.intrinsics[1, 1] * cam[..., 1] / z + self.intrinsics[1, 2]
        return u, v, z

    def ray_directions(self, height: int, width: int) -> NDArray[np.float64]:
        """Camera-frame ray directions with unit z component, (H, W, 3)."""
        vs, us = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
        k_inv = np.linalg.inv(self.intrinsics)
        pix = np.stack([us, vs, np.ones_like(us)], axis=-1)
        return pix @ k_inv.T

    def scaled(self, scale: float) -> "CameraTrack":
        poses = tuple(SE3(pose.rotation, pose.translation * scale) for pose in self.poses)
        return CameraTrack(self.intrinsics, poses)


@dataclass(frozen=True, eq=False)
class Dataset:
    points: PointMapSequence
    flows: Tuple[FlowField, ...]
    motion: MotionSequence
    contacts: ContactSequence
    cameras: CameraTrack
    human_masks: Optional[NDArray] = None  # (T, H, W) bool
    human_depth: Optional[NDArray] = None  # (T, H, W) float32, 0 where no body
    fps: float = 30.0

    @property
    def num_frames(self) -> int:
        return self.points.num_frames


# --- on-disk format -------------------------------------------------------


def _read_binary(root: Path, rel: Any, dtype: str, shape: Tuple[int, ...], what: str) -> NDArray:
    if not isinstance(rel, str):
        raise ManifestParse(f"Manifest entry for {what} must be a file path")
    path = root / rel
    if not path.exists():
        raise ShapeMismatch(f"{what} file is missing: {path}")
    data = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ShapeMismatch(f"{what} file {path} holds {data.size} values, manifest declares {shape}")
    return data.reshape(shape)


def _write_binary(root: Path, rel: str, array: NDArray, dtype: str) -> str:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=dtype).tofile(path)
    return rel


def _require(mapping: Dict[str, Any], key: str, where: str) -> Any:
    if not isinstance(mapping, dict) or key not in mapping:
        raise ManifestParse(f"Manifest is missing '{key}' in {where}")
    return mapping[key]


def parse_motion_text(text: str, num_joints: Optional[int] = None) -> MotionSequence:
    """Parse whitespace-separated motion records; the joint count is inferred from
    the first record when not given."""
    rows: List[List[float]] = []
    width = None if num_joints is None else MOTION_ROOT_WIDTH + MOTION_JOINT_WIDTH * num_joints
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            values = [float(token) for token in stripped.split()]
        except ValueError as err:
            raise ManifestParse(f"Motion line {line_no}: {err}") from err
        if width is None:
            joint_values = len(values) - MOTION_ROOT_WIDTH
            if joint_values < MOTION_JOINT_WIDTH or joint_values % MOTION_JOINT_WIDTH:
                raise ShapeMismatch(f"Motion line {line_no} has {len(values)} values, not 7 + 13 per joint")
            num_joints, width = joint_values // MOTION_JOINT_WIDTH, len(values)
        if len(values) != width:
            raise ShapeMismatch(f"Motion line {line_no} has {len(values)} values, expected {width}")
        rows.append(values)
    if not rows:
        raise ManifestParse("Motion file has no frame records")
    table = np.array(rows, dtype=np.float64)
    joints = table[:, MOTION_ROOT_WIDTH:].reshape(len(rows), num_joints, MOTION_JOINT_WIDTH)
    return MotionSequence(
        root_pose=table[:, :MOTION_ROOT_WIDTH],
        joint_positions=joints[..., 0:3],
        joint_rotations=joints[..., 3:7],
        linear_velocity=joints[..., 7:10],
        angular_velocity=joints[..., 10:13],
    )


def format_motion_text(motion: MotionSequence) -> str:
    lines = ["# root: qw qx qy qz tx ty tz | per joint: px py pz qw qx qy qz vx vy vz wx wy wz"]
    for t in range(motion.num_frames):
        joints = np.concatenate(
            [
                motion.joint_positions[t],
                motion.joint_rotations[t],
                motion.linear_velocity[t],
                motion.angular_velocity[t],
            ],
            axis=1,
        ).reshape(-1)
        values = np.concatenate([motion.root_pose[t], joints])
        lines.append(" ".join(repr(float(v)) for v in values))
    return "\n".join(lines) + "\n"


def parse_contacts_text(text: str, motion: MotionSequence) -> ContactSequence:
    frames: List[Tuple[ContactPoint, ...]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records = json.loads(line)
        except json.JSONDecodeError as err:
            raise ManifestParse(f"Contacts line {line_no} is not valid JSON: {err}") from err
        if not isinstance(records, list):
            raise ManifestParse(f"Contacts line {line_no} must be a JSON array")
        frame = []
        for record in records:
            try:
                xyz = tuple(float(v) for v in record["xyz"])
                frame.append(ContactPoint(int(record["vertex_id"]), float(record["confidence"]), xyz))
            except (KeyError, TypeError, ValueError) as err:
                raise ManifestParse(f"Contacts line {line_no}: malformed record {record!r}") from err
            if len(xyz) != 3:
                raise ShapeMismatch(f"Contacts line {line_no}: xyz must have 3 values")
        frames.append(tuple(frame))
    return ContactSequence(tuple(frames), motion.body_speed(), motion.pelvis)


def format_contacts_text(contacts: ContactSequence) -> str:
    lines = []
    for frame in contacts.frames:
        records = [
            {"vertex_id": c.vertex_id, "confidence": c.confidence, "xyz": list(c.position)}
            for c in frame
        ]
        lines.append(json.dumps(records))
    return "\n".join(lines) + "\n"


def load_dataset(manifest_path: str) -> Dataset:
    """Load and fully validate a dataset directory described by its manifest."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestParse(f"Manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ManifestParse(f"Manifest is not valid JSON: {err}") from err
    if not isinstance(manifest, dict):
        raise ManifestParse("Manifest must be a JSON object")
    root = path.parent

    dims = _require(manifest, "dims", "manifest")
    try:
        num_frames, height, width, num_joints = (int(_require(dims, key, "dims")) for key in ("T", "H", "W", "J"))
    except (TypeError, ValueError) as err:
        raise ManifestParse(f"Manifest dims must be integers: {err}") from err
    frames = _require(manifest, "frames", "manifest")
    if not isinstance(frames, list) or not frames:
        raise ManifestParse("Manifest frame list is empty")
    if num_frames < 1 or len(frames) != num_frames:
        raise ManifestParse(f"Manifest declares T={num_frames} but lists {len(frames)} frames")
    if min(height, width, num_joints) < 1:
        raise ManifestParse("Manifest dims H, W and J must be positive")

    try:
        poses = tuple(SE3.from_array7(_require(frame, "camera_pose", f"frame {i}")) for i, frame in enumerate(frames))
        intrinsics = np.asarray(_require(manifest, "intrinsics", "manifest"), dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise ManifestParse(f"Malformed camera record: {err}") from err
    cameras = CameraTrack(intrinsics, poses)

    files = _require(manifest, "files", "manifest")
    points = _read_binary(root, _require(files, "points", "files"), "<f4", (num_frames, height, width, 3), "points")
    valid = _read_binary(root, _require(files, "valid", "files"), "u1", (num_frames, height, width), "valid") != 0
    applied = manifest.get("filters_applied", [])
    if not isinstance(applied, list) or not all(isinstance(tag, str) for tag in applied):
        raise ManifestParse("Manifest filters_applied must be a list of strings")
    point_maps = PointMapSequence(points, valid, tuple(applied))

    human_masks = None
    human_depth = None
    if files.get("human_masks"):
        human_masks = _read_binary(root, files["human_masks"], "u1", (num_frames, height, width), "human_masks") != 0
    if files.get("human_depth"):
        human_depth = _read_binary(root, files["human_depth"], "<f4", (num_frames, height, width), "human_depth")
        if not np.all(np.isfinite(human_depth)):
            raise NonFiniteData("Human depth contains NaN or inf")

    flows = []
    for record in manifest.get("flows", []):
        try:
            source, target = int(_require(record, "source", "flow")), int(_require(record, "target", "flow"))
        except (TypeError, ValueError) as err:
            raise ManifestParse(f"Malformed flow record: {err}") from err
        if not (0 <= source < num_frames and 0 <= target < num_frames):
            raise ManifestParse(f"Flow {source}->{target} references a frame outside [0, {num_frames})")
        flow = _read_binary(root, _require(record, "flow", "flow"), "<f4", (height, width, 2), f"flow {source}->{target}")
        covis = _read_binary(
            root, _require(record, "covisibility", "flow"), "u1", (height, width), f"covisibility {source}->{target}"
        )
        flows.append(FlowField(source, target, flow, covis != 0))

    motion_path = root / _require(files, "motion", "files")
    if not motion_path.exists():
        raise ShapeMismatch(f"motion file is missing: {motion_path}")
    motion = parse_motion_text(motion_path.read_text(encoding="utf-8"), num_joints)
    if motion.num_frames != num_frames:
        raise ShapeMismatch(f"Motion has {motion.num_frames} frames, manifest declares {num_frames}")

    contacts_path = root / _require(files, "contacts", "files")
    if not contacts_path.exists():
        raise ShapeMismatch(f"contacts file is missing: {contacts_path}")
    contacts = parse_contacts_text(contacts_path.read_text(encoding="utf-8"), motion)
    if contacts.num_frames != num_frames:
        raise ShapeMismatch(f"Contacts have {contacts.num_frames} frames, manifest declares {num_frames}")

    try:
        fps = float(manifest.get("fps", 30.0))
    except (TypeError, ValueError) as err:
        raise ManifestParse(f"Manifest fps must be a number: {err}") from err

    return Dataset(point_maps, tuple(flows), motion, contacts, cameras, human_masks, human_depth, fps)


def save_dataset(dataset: Dataset, directory: str, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``dataset`` in the manifest format read by :func:`load_dataset`."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    pts = dataset.points
    files: Dict[str, Any] = {
        "points": _write_binary(root, "points.f32", pts.points, "<f4"),
        "valid": _write_binary(root, "valid.u8", pts.valid, "u1"),
        "motion": "motion.txt",
        "contacts": "contacts.jsonl",
    }
    (root / "motion.txt").write_text(format_motion_text(dataset.motion), encoding="utf-8")
    (root / "contacts.jsonl").write_text(format_contacts_text(dataset.contacts), encoding="utf-8")
    if dataset.human_masks is not None:
        files["human_masks"] = _write_binary(root, "human_masks.u8", dataset.human_masks, "u1")
    if dataset.human_depth is not None:
        files["human_depth"] = _write_binary(root, "human_depth.f32", dataset.human_depth, "<f4")

    flows = []
    for flow in dataset.flows:
        stem = f"flows/flow_{flow.source:04d}_{flow.target:04d}"
        flows.append(
            {
                "source": flow.source,
                "target": flow.target,
                "flow": _write_binary(root, stem + ".f32", flow.flow, "<f4"),
                "covisibility": _write_binary(root, stem + ".u8", flow.covisibility, "u1"),
            }
        )

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": {"T": pts.num_frames, "H": pts.height, "W": pts.width, "J": dataset.motion.num_joints},
        "fps": dataset.fps,
        "intrinsics": dataset.cameras.intrinsics.tolist(),
        "frames": [
            {"index": t, "camera_pose": [float(v) for v in pose.array7()]}
            for t, pose in enumerate(dataset.cameras.poses)
        ],
        "files": files,
        "flows": flows,
    }
    if pts.filters_applied:
        manifest["filters_applied"] = list(pts.filters_applied)
    if extra:
        manifest.update(extra)
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def frame_index_grid(height: int, width: int) -> Tuple[NDArray, NDArray]:
    """Row and column index of every flat pixel index."""
    flat = np.arange(height * width)
    return flat // width, flat % width


def stack_flows(flows: Sequence[FlowField]) -> Dict[Tuple[int, int], FlowField]:
    return {(flow.source, flow.target): flow for flow in flows}
