from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from geometry.core import PlanarPrimitive
from ingest.dataset import FlowField, PointMapSequence
from synth.scenes import SceneSpec
from utils.parallel import parallel_map


NO_HIT = -2
HUMAN = -3
OCCLUSION_TOL = 1e-6
OUTLIER_DEPTH = (0.5, 10.0)

Faces = Sequence[Tuple[int, PlanarPrimitive]]


@dataclass(frozen=True, eq=False)
class RenderedFrames:
    points: PointMapSequence  # noisy observation
    clean_points: NDArray  # (T, H, W, 3) exact surface hits, zeros where nothing was hit
    plane_ids: NDArray  # (T, H, W) int, scene primitive index, NO_HIT or HUMAN
    outliers: NDArray  # (T, H, W) bool, pixels whose depth was replaced
    human_masks: NDArray  # (T, H, W) bool
    human_depth: NDArray  # (T, H, W) float32, camera depth of the body, 0 elsewhere


def _face_hits(prim: PlanarPrimitive, origins: NDArray, dirs: NDArray) -> NDArray:
    """Ray parameter of the hit with the observed rectangle of ``prim``, inf on miss."""
    normal = prim.normal
    face_center = prim.center - prim.half_extents[2] * normal
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((face_center - origins) @ normal) / denom
    t = np.where(np.abs(denom) > 1e-12, t, np.inf)
    t = np.where(t > OCCLUSION_TOL, t, np.inf)
    finite = np.isfinite(t)
    hit = origins + np.where(finite, t, 0.0)[:, None] * dirs
    local = (hit - face_center) @ prim.rotation[:, :2]
    inside = np.all(np.abs(local) <= prim.half_extents[:2] + 1e-12, axis=1)
    return np.where(finite & inside, t, np.inf)


def _box_hits(box: NDArray, origins: NDArray, dirs: NDArray) -> NDArray:
    """Slab test against an axis-aligned box (min corner, max corner)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box[0] - origins) * inv
        t1 = (box[1] - origins) * inv
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.max(np.minimum(t0, t1), axis=1)
    far = np.min(np.maximum(t0, t1), axis=1)
    hit = (far >= np.maximum(near, 0.0)) & (far > OCCLUSION_TOL)
    entry = np.where(near > OCCLUSION_TOL, near, far)
    return np.where(hit, entry, np.inf)


def cast_rays(
    faces: Faces, origins: NDArray, dirs: NDArray, human_box: Optional[NDArray] = None
) -> Tuple[NDArray, NDArray]:
    """Nearest hit of each ray: (ray parameter, primitive index or NO_HIT / HUMAN)."""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best = np.full(len(dirs), np.inf)
    ids = np.full(len(dirs), NO_HIT, dtype=np.int64)
    for index, prim in faces:
        t = _face_hits(prim, origins, dirs)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = index
    if human_box is not None:
        t = _box_hits(np.asarray(human_box, dtype=np.float64), origins, dirs)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = HUMAN
    return best, ids


def _render_frame(spec: SceneSpec, t: int, human_box: Optional[NDArray]):
    cams = spec.cameras()
    pose = spec.poses[t]
    cam_dirs = cams.ray_directions(spec.height, spec.width).reshape(-1, 3)
    world_dirs = cam_dirs @ pose.rotation.matrix().T
    depth, ids = cast_rays(spec.rendered(), pose.translation, world_dirs, human_box)

    hit = ids != NO_HIT
    clean_depth = np.where(hit, depth, 0.0)
    clean = pose.translation + clean_depth[:, None] * world_dirs

    # draws are unconditional so the stream is the same whatever was hit
    rng = np.random.default_rng([spec.seed, t])
    noise = rng.standard_normal(len(ids))
    coin = rng.random(len(ids))
    wild = rng.uniform(*OUTLIER_DEPTH, size=len(ids))

    scene = ids >= 0
    noisy_depth = clean_depth + spec.sigma * noise
    outliers = scene & (coin < spec.outlier_fraction)
    noisy_depth = np.where(outliers, wild, noisy_depth)
    noisy = pose.translation + noisy_depth[:, None] * world_dirs
    valid = hit & (noisy_depth > 0)

    shape = (spec.height, spec.width)
    human = ids == HUMAN
    return (
        np.where(valid[:, None], noisy, 0.0).reshape(shape + (3,)),
        valid.reshape(shape),
        clean.reshape(shape + (3,)),
        ids.reshape(shape),
        outliers.reshape(shape),
        human.reshape(shape),
        np.where(human, clean_depth, 0.0).reshape(shape),
    )


def render_pointmaps(spec: SceneSpec, human_boxes: Optional[NDArray] = None, workers: int = 1) -> RenderedFrames:
    """Ray-cast every frame of ``spec`` into a world-frame point map.

    Depth noise is added along each ray in camera-depth units; a fraction of
    scene pixels gets a uniformly random depth instead. The human proxy box of
    a frame, when given, occludes the scene and is marked in ``human_masks``.
    """
    frames = parallel_map(
        lambda t: _render_frame(spec, t, None if human_boxes is None else human_boxes[t]),
        range(spec.num_frames),
        workers,
    )
    points, valid, clean, ids, outliers, human, human_depth = (np.stack(parts) for parts in zip(*frames))
    return RenderedFrames(
        points=PointMapSequence(points, valid),
        clean_points=clean,
        plane_ids=ids,
        outliers=outliers,
        human_masks=human,
        human_depth=human_depth.astype(np.float32),
    )


def _pair_flow(
    spec: SceneSpec, rendered: RenderedFrames, source: int, target: int, human_boxes: Optional[NDArray]
) -> FlowField:
    cams = spec.cameras()
    height, width = spec.height, spec.width
    ids = rendered.plane_ids[source].reshape(-1)
    pts = rendered.clean_points[source].reshape(-1, 3)
    vs, us = np.divmod(np.arange(height * width), width)

    u, v, z = cams.project(pts, target)
    with np.errstate(invalid="ignore"):
        ui = np.floor(u + 0.5)
        vi = np.floor(v + 0.5)
        inside = (ids >= 0) & (z > 0) & (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)

    covisible = np.zeros(height * width, dtype=bool)
    candidates = np.flatnonzero(inside)
    if len(candidates):
        origin = cams.center(target)
        offset = pts[candidates] - origin
        dist = np.linalg.norm(offset, axis=1)
        box = None if human_boxes is None else human_boxes[target]
        t_hit, _ = cast_rays(spec.rendered(), origin, offset / dist[:, None], box)
        covisible[candidates] = t_hit >= dist - OCCLUSION_TOL

    flow = np.zeros((height * width, 2))
    flow[covisible, 0] = u[covisible] - us[covisible]
    flow[covisible, 1] = v[covisible] - vs[covisible]
    return FlowField(source, target, flow.reshape(height, width, 2), covisible.reshape(height, width))


def exact_flows(
    spec: SceneSpec,
    rendered: RenderedFrames,
    strides: Sequence[int] = (1, 5),
    human_boxes: Optional[NDArray] = None,
    workers: int = 1,
) -> List[FlowField]:
    """Ground-truth flow for every forward pair ``(t, t + s)`` and stride ``s``.

    A source pixel is covisible when its clean surface point projects inside
    the target image and nothing lies between it and the target camera.
    """
    pairs = [(t, t + s) for s in sorted(set(strides)) for t in range(spec.num_frames - s)]
    return parallel_map(lambda pair: _pair_flow(spec, rendered, pair[0], pair[1], human_boxes), pairs, workers)
