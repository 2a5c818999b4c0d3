import math
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from geometry.core import MIN_THICKNESS, SE3, PlanarPrimitive, Plane, UnitQuat, as_vec3
from ingest.dataset import CameraTrack
from utils.errors import ConfigError


SCENARIOS = ("walk", "sit", "stairs", "room")
DEFAULT_FOV_DEG = 70.0


def face_primitive(
    center: ArrayLike,
    u_axis: ArrayLike,
    size_u: float,
    size_v: float,
    facing: ArrayLike,
    thickness: float = MIN_THICKNESS,
) -> PlanarPrimitive:
    """Ground-truth slab whose visible face is the rectangle at ``center``.

    ``facing`` is the side the surface is seen from; the slab extends away from it.
    """
    normal = -as_vec3(facing) / np.linalg.norm(as_vec3(facing))
    x_axis = as_vec3(u_axis) - np.dot(as_vec3(u_axis), normal) * normal
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(normal, x_axis)
    return PlanarPrimitive(
        rotation=np.column_stack([x_axis, y_axis, normal]),
        center=as_vec3(center) + 0.5 * thickness * normal,
        extents=[size_u, size_v, thickness],
    )


def look_at(eye: ArrayLike, target: ArrayLike, up: ArrayLike = (0.0, 0.0, 1.0)) -> SE3:
    """Camera-to-world pose with OpenCV axes (x right, y down, z forward)."""
    eye = as_vec3(eye)
    forward = as_vec3(target) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, as_vec3(up))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return SE3(UnitQuat.from_matrix(np.column_stack([right, down, forward])), eye)


def pinhole_intrinsics(height: int, width: int, fov_deg: float = DEFAULT_FOV_DEG) -> NDArray[np.float64]:
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: Tuple[PlanarPrimitive, ...]
    poses: Tuple[SE3, ...]
    intrinsics: NDArray
    height: int
    width: int
    sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    labels: Tuple[str, ...] = ()
    hidden: FrozenSet[int] = field(default_factory=frozenset)
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "hidden", frozenset(self.hidden))
        labels = tuple(self.labels) or ("plane",) * len(self.primitives)
        object.__setattr__(self, "labels", labels)
        if not self.primitives:
            raise ConfigError("Scene needs at least one primitive")
        if len(self.poses) < 2:
            raise ConfigError("Scene needs at least two camera frames")
        if self.sigma < 0:
            raise ConfigError(f"Noise sigma must be non-negative, got {self.sigma}")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError(f"Outlier fraction must be in [0, 1], got {self.outlier_fraction}")
        if len(labels) != len(self.primitives):
            raise ConfigError("Scene labels must name every primitive")
        if self.height < 2 or self.width < 2:
            raise ConfigError("Scene resolution must be at least 2x2")

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    def cameras(self) -> CameraTrack:
        return CameraTrack(self.intrinsics, self.poses)

    def planes(self) -> List[Plane]:
        return [prim.observed_plane for prim in self.primitives]

    def rendered(self) -> List[Tuple[int, PlanarPrimitive]]:
        return [(i, prim) for i, prim in enumerate(self.primitives) if i not in self.hidden]

    def indices(self, label: str) -> List[int]:
        return [i for i, name in enumerate(self.labels) if name == label]


def _camera_sweep(
    num_frames: int, eye_from: Sequence[float], eye_to: Sequence[float], target_from: Sequence[float], target_to: Sequence[float]
) -> Tuple[SE3, ...]:
    poses = []
    for t in range(num_frames):
        s = t / max(num_frames - 1, 1)
        eye = (1 - s) * np.asarray(eye_from) + s * np.asarray(eye_to)
        target = (1 - s) * np.asarray(target_from) + s * np.asarray(target_to)
        poses.append(look_at(eye, target))
    return tuple(poses)


def staircase_scene(
    num_frames: int = 24,
    height: int = 96,
    width: int = 128,
    sigma: float = 0.0,
    outliers: float = 0.0,
    seed: int = 0,
    steps: int = 5,
    rise: float = 0.25,
    run: float = 0.4,
    stair_width: float = 1.5,
) -> SceneSpec:
    """Straight flight of ``steps`` treads and risers climbing +y from a wide floor."""
    up, toward_camera = (0.0, 0.0, 1.0), (0.0, -1.0, 0.0)
    prims = [face_primitive((0.0, 1.0, 0.0), (1.0, 0.0, 0.0), 8.0, 12.0, up)]
    labels = ["ground"]
    for i in range(steps):
        prims.append(
            face_primitive((0.0, run * i, rise * (i + 0.5)), (1.0, 0.0, 0.0), stair_width, rise, toward_camera)
        )
        labels.append("riser")
        prims.append(
            face_primitive((0.0, run * (i + 0.5), rise * (i + 1)), (1.0, 0.0, 0.0), stair_width, run, up)
        )
        labels.append("tread")
    poses = _camera_sweep(num_frames, (-0.7, -3.2, 2.4), (0.7, -2.8, 2.6), (0.0, 0.8, 0.5), (0.0, 1.2, 0.8))
    return SceneSpec(
        tuple(prims), poses, pinhole_intrinsics(height, width), height, width,
        sigma, outliers, seed, tuple(labels), frozenset(), "stairs",
    )


def sit_scene(
    num_frames: int = 96,
    height: int = 96,
    width: int = 128,
    sigma: float = 0.0,
    outliers: float = 0.0,
    seed: int = 0,
    seat_height: float = 0.45,
    hide_seat: bool = True,
) -> SceneSpec:
    """Floor, back wall and a chair whose seat is left out of the rendered views."""
    up, toward_camera = (0.0, 0.0, 1.0), (0.0, -1.0, 0.0)
    prims = [
        face_primitive((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 8.0, 8.0, up),
        face_primitive((0.0, 1.5, 1.25), (1.0, 0.0, 0.0), 5.0, 2.5, toward_camera),
        face_primitive((0.0, 0.25, seat_height + 0.3), (1.0, 0.0, 0.0), 0.5, 0.6, toward_camera),
        face_primitive((0.0, 0.0, seat_height), (1.0, 0.0, 0.0), 0.5, 0.5, up),
    ]
    labels = ("ground", "wall", "backrest", "seat")
    hidden = frozenset({3}) if hide_seat else frozenset()
    poses = _camera_sweep(num_frames, (-1.2, -3.0, 1.8), (1.2, -2.7, 1.9), (0.0, 0.2, 0.6), (0.0, 0.2, 0.6))
    return SceneSpec(
        tuple(prims), poses, pinhole_intrinsics(height, width), height, width,
        sigma, outliers, seed, labels, hidden, "sit",
    )


def walk_scene(
    num_frames: int = 48,
    height: int = 96,
    width: int = 128,
    sigma: float = 0.0,
    outliers: float = 0.0,
    seed: int = 0,
) -> SceneSpec:
    up, toward_camera = (0.0, 0.0, 1.0), (0.0, -1.0, 0.0)
    prims = [
        face_primitive((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 10.0, 10.0, up),
        face_primitive((0.0, 3.0, 1.25), (1.0, 0.0, 0.0), 8.0, 2.5, toward_camera),
    ]
    poses = _camera_sweep(num_frames, (-1.5, -3.0, 1.7), (1.5, -3.0, 1.7), (-1.0, 1.0, 0.5), (1.0, 1.0, 0.5))
    return SceneSpec(
        tuple(prims), poses, pinhole_intrinsics(height, width), height, width,
        sigma, outliers, seed, ("ground", "wall"), frozenset(), "walk",
    )


def _box_faces(center_xy: Sequence[float], size: Sequence[float]) -> List[PlanarPrimitive]:
    """Top and four sides of a box standing on the floor; each slab extends inward."""
    cx, cy = center_xy
    sx, sy, sz = size
    return [
        face_primitive((cx, cy, sz), (1.0, 0.0, 0.0), sx, sy, (0.0, 0.0, 1.0)),
        face_primitive((cx + sx / 2, cy, sz / 2), (0.0, 1.0, 0.0), sy, sz, (1.0, 0.0, 0.0)),
        face_primitive((cx - sx / 2, cy, sz / 2), (0.0, 1.0, 0.0), sy, sz, (-1.0, 0.0, 0.0)),
        face_primitive((cx, cy + sy / 2, sz / 2), (1.0, 0.0, 0.0), sx, sz, (0.0, 1.0, 0.0)),
        face_primitive((cx, cy - sy / 2, sz / 2), (1.0, 0.0, 0.0), sx, sz, (0.0, -1.0, 0.0)),
    ]


def room_scene(
    num_frames: int = 36,
    height: int = 64,
    width: int = 80,
    sigma: float = 0.0,
    outliers: float = 0.0,
    seed: int = 0,
) -> SceneSpec:
    """Cluttered 6 m room: floor, four walls and three boxes, 20 planes in all."""
    half, wall_h = 3.0, 2.5
    prims = [face_primitive((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 2 * half, 2 * half, (0.0, 0.0, 1.0))]
    labels = ["ground"]
    for axis, sign in ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)):
        center = np.array([0.0, 0.0, wall_h / 2])
        center[axis] = sign * half
        facing = np.zeros(3)
        facing[axis] = -sign
        u_axis = (0.0, 1.0, 0.0) if axis == 0 else (1.0, 0.0, 0.0)
        prims.append(face_primitive(center, u_axis, 2 * half, wall_h, facing))
        labels.append("wall")
    for center_xy, size in (((1.2, 0.4), (0.8, 0.6, 0.75)), ((-1.1, 0.9), (0.6, 0.6, 0.5)), ((0.2, -1.3), (1.0, 0.5, 0.9))):
        prims.extend(_box_faces(center_xy, size))
        labels.extend(["box"] * 5)

    poses = []
    for t in range(num_frames):
        phi = 2.0 * math.pi * t / num_frames
        eye = (2.4 * math.cos(phi), 2.4 * math.sin(phi), 1.7)
        poses.append(look_at(eye, (0.0, 0.0, 0.4)))
    return SceneSpec(
        tuple(prims), tuple(poses), pinhole_intrinsics(height, width), height, width,
        sigma, outliers, seed, tuple(labels), frozenset(), "room",
    )


def build_scene(scenario: str, num_frames: Optional[int] = None, **kwargs) -> SceneSpec:
    builders = {"walk": walk_scene, "sit": sit_scene, "stairs": staircase_scene, "room": room_scene}
    if scenario not in builders:
        raise ConfigError(f"Unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    if num_frames is not None:
        kwargs["num_frames"] = num_frames
    return builders[scenario](**kwargs)
