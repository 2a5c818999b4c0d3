"""Scene and motion quality metrics.

Units follow the usual world-grounded motion benchmarks: Chamfer terms in
metres, MPJPE and acceleration error in millimetres, RTE in percent of the
ground-truth path length, and jitter in units of 10 m/s^3.
"""

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from trimesh.triangles import closest_point as closest_on_triangles

from geometry.core import PlanarPrimitive, Plane, as_points, cuboid_signed_distances
from ingest.dataset import MotionSequence
from utils.errors import EmptySet, LengthMismatch


SEGMENT_LENGTH = 100
MIN_TRAILING_SEGMENT = 10
SURFACE_CHUNK = 1024
METRIC_UNITS = {
    "cd_bi": "m",
    "cd_one_recon_to_gt": "m",
    "cd_one_gt_to_recon": "m",
    "non_pene": "fraction",
    "wa_mpjpe100": "mm",
    "w_mpjpe100": "mm",
    "rte": "% of ground-truth path length",
    "jitter": "10 m/s^3 (mean third finite difference)",
    "accel": "mm/frame^2 (mean second finite difference error)",
    "mean_episode_length": "frames",
    "mean_episode_return": "reward",
}

Joints = Union[MotionSequence, ArrayLike]


def _joints(motion: Joints) -> NDArray[np.float64]:
    if isinstance(motion, MotionSequence):
        return motion.joint_positions
    return np.asarray(motion, dtype=np.float64)


# --- Chamfer -----------------------------------------------------------------


def one_way_chamfer(source: ArrayLike, target: ArrayLike) -> float:
    src, dst = as_points(source), as_points(target)
    if len(src) == 0 or len(dst) == 0:
        raise EmptySet("Chamfer distance needs two non-empty point sets")
    dist, _ = cKDTree(dst).query(src, k=1)
    return float(np.mean(dist))


def chamfer(recon: ArrayLike, gt: ArrayLike) -> Tuple[float, float, float]:
    """(recon -> gt, gt -> recon, bidirectional mean of the two)."""
    forward = one_way_chamfer(recon, gt)
    backward = one_way_chamfer(gt, recon)
    return forward, backward, 0.5 * (forward + backward)


def sample_primitive_surface(
    primitives: Sequence[PlanarPrimitive], density: float = 100.0, seed: int = 0
) -> NDArray[np.float64]:
    """Uniform samples over both planar faces of every box, ``density`` points per m^2.

    Each face draws from its own ``(seed, primitive, side)`` stream, so appending
    primitives leaves the samples of the earlier ones unchanged.
    """
    samples = [np.zeros((0, 3))]
    for index, prim in enumerate(primitives):
        count = max(1, int(round(density * float(prim.extents[0] * prim.extents[1]))))
        for side in (0, 1):
            rng = np.random.default_rng([seed, index, side])
            local = (rng.random((count, 3)) - 0.5) * prim.extents
            local[:, 2] = (2 * side - 1) * prim.half_extents[2]
            samples.append(local @ prim.rotation.T + prim.center)
    return np.concatenate(samples)


def sample_mesh_surface(mesh: trimesh.Trimesh, count: int = 10000, seed: int = 0) -> NDArray[np.float64]:
    points, _ = trimesh.sample.sample_surface(mesh, count, seed=seed)
    return np.asarray(points, dtype=np.float64)


def _triangle_distances(triangles: NDArray, points: NDArray) -> NDArray[np.float64]:
    return np.linalg.norm(closest_on_triangles(triangles, points) - points, axis=1)


def mesh_surface_distances(points: ArrayLike, mesh: trimesh.Trimesh, chunk: int = SURFACE_CHUNK) -> NDArray[np.float64]:
    """Exact distance from each point to the nearest triangle of ``mesh``.

    Triangles are indexed by centroid. Any triangle closer than the one owning
    the nearest centroid has its centroid within that distance plus the largest
    centroid-to-vertex radius, so only those candidates are measured.
    """
    pts = as_points(points)
    tris = np.asarray(mesh.triangles, dtype=np.float64)
    if len(pts) == 0 or len(tris) == 0:
        raise EmptySet("Surface distances need points and a mesh with triangles")
    centroids = tris.mean(axis=1)
    reach = float(np.linalg.norm(tris - centroids[:, None], axis=2).max())
    tree = cKDTree(centroids)
    _, nearest = tree.query(pts, k=1)
    best = _triangle_distances(tris[nearest], pts)
    for start in range(0, len(pts), chunk):
        stop = min(start + chunk, len(pts))
        candidates = tree.query_ball_point(pts[start:stop], best[start:stop] + reach)
        owners = np.repeat(np.arange(start, stop), [len(c) for c in candidates])
        faces = np.fromiter(itertools.chain.from_iterable(candidates), dtype=np.int64, count=len(owners))
        np.minimum.at(best, owners, _triangle_distances(tris[faces], pts[owners]))
    return best


def primitive_surface_distances(points: ArrayLike, primitives: Sequence[PlanarPrimitive]) -> NDArray[np.float64]:
    """Distance from each point to the nearest box surface; points inside a box measure to its faces."""
    pts = as_points(points)
    if len(pts) == 0 or not primitives:
        raise EmptySet("Surface distances need points and at least one primitive")
    best = np.full(len(pts), np.inf)
    for prim in primitives:
        np.minimum(best, np.abs(cuboid_signed_distances(pts, prim)), out=best)
    return best


def scene_chamfer(
    primitives: Sequence[PlanarPrimitive], mesh: trimesh.Trimesh, samples: int = 10000, seed: int = 0
) -> Tuple[float, float, float]:
    """(recon -> gt, gt -> recon, bidirectional) between primitives and a ground-truth mesh.

    The mesh gets ``samples`` area-uniform points, each scored against the
    nearest primitive surface. The primitives are sampled at the same area
    density and scored against the mesh surface.
    """
    if not primitives:
        raise EmptySet("Scene Chamfer needs at least one primitive")
    area = float(mesh.area)
    if area <= 0:
        raise EmptySet("Ground-truth mesh has no surface area")
    truth = sample_mesh_surface(mesh, samples, seed)
    recon = sample_primitive_surface(primitives, samples / area, seed)
    forward = float(np.mean(mesh_surface_distances(recon, mesh)))
    backward = float(np.mean(primitive_surface_distances(truth, primitives)))
    return forward, backward, 0.5 * (forward + backward)


# --- contact with scene -----------------------------------------------------


def non_penetration(body_points: ArrayLike, primitives: Sequence[PlanarPrimitive], eps: float = 0.01) -> float:
    """Fraction of (frame, vertex) pairs not deeper than ``eps`` inside any primitive."""
    pts = as_points(np.asarray(body_points, dtype=np.float64).reshape(-1, 3))
    if len(pts) == 0:
        raise EmptySet("Non-penetration needs at least one body point")
    if not primitives:
        return 1.0
    clear = np.ones(len(pts), dtype=bool)
    for prim in primitives:
        clear &= cuboid_signed_distances(pts, prim) >= -eps
    return float(clear.mean())


# --- world-grounded motion ---------------------------------------------------


def rigid_align(source: NDArray, target: NDArray) -> Tuple[NDArray, NDArray]:
    """Rotation R and translation t minimising |R source + t - target| (no scale)."""
    src_mean, dst_mean = source.mean(axis=0), target.mean(axis=0)
    cov = (source - src_mean).T @ (target - dst_mean)
    u, _, vt = np.linalg.svd(cov)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(vt.T @ u.T)) or 1.0])
    rot = vt.T @ fix @ u.T
    return rot, dst_mean - rot @ src_mean


def segment_bounds(num_frames: int) -> List[Tuple[int, int]]:
    """100-frame windows; a shorter tail counts when it has at least 10 frames."""
    bounds = []
    for start in range(0, num_frames, SEGMENT_LENGTH):
        stop = min(start + SEGMENT_LENGTH, num_frames)
        if stop - start == SEGMENT_LENGTH or stop - start >= MIN_TRAILING_SEGMENT:
            bounds.append((start, stop))
    return bounds or [(0, num_frames)]


def _check_lengths(pred: NDArray, gt: NDArray) -> None:
    if pred.shape != gt.shape:
        raise LengthMismatch(f"Predicted joints {pred.shape} and ground truth {gt.shape} differ")
    if len(pred) == 0:
        raise LengthMismatch("Motion sequences are empty")


def world_mpjpe(pred: Joints, gt: Joints, mode: str = "first_two") -> float:
    """Mean per-joint position error in mm over 100-frame segments.

    ``mode="first_two"`` aligns each segment on its first two frames (W-MPJPE),
    ``mode="full"`` on the whole segment (WA-MPJPE). In ``first_two`` mode the
    alignment frames are left out of the mean unless the segment has no others.
    """
    p, g = _joints(pred), _joints(gt)
    _check_lengths(p, g)
    errors = []
    for start, stop in segment_bounds(len(p)):
        seg_p, seg_g = p[start:stop], g[start:stop]
        ref = 2 if mode == "first_two" else len(seg_p)
        rot, trans = rigid_align(seg_p[:ref].reshape(-1, 3), seg_g[:ref].reshape(-1, 3))
        scored = slice(ref, None) if mode == "first_two" and len(seg_p) > ref else slice(None)
        aligned = seg_p[scored] @ rot.T + trans
        errors.append(float(np.linalg.norm(aligned - seg_g[scored], axis=-1).mean()) * 1000.0)
    return float(np.mean(errors))


def trajectory_metrics(pred: Joints, gt: Joints, fps: float = 30.0) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """(RTE %, jitter, accel). A metric the sequence is too short for is None."""
    p, g = _joints(pred), _joints(gt)
    _check_lengths(p, g)

    rte = None
    path = float(np.linalg.norm(np.diff(g[:, 0], axis=0), axis=-1).sum())
    if path > 0:
        ref = min(2, len(p))
        rot, trans = rigid_align(p[:ref].reshape(-1, 3), g[:ref].reshape(-1, 3))
        drift = np.linalg.norm((p[-1, 0] @ rot.T + trans) - g[-1, 0])
        rte = float(drift / path * 100.0)

    accel = None
    if len(p) >= 3:
        acc_p = p[2:] - 2 * p[1:-1] + p[:-2]
        acc_g = g[2:] - 2 * g[1:-1] + g[:-2]
        accel = float(np.linalg.norm(acc_p - acc_g, axis=-1).mean() * 1000.0)

    jitter = None
    if len(p) >= 4:
        jerk = p[3:] - 3 * p[2:-1] + 3 * p[1:-2] - p[:-3]
        jitter = float(np.linalg.norm(jerk, axis=-1).mean() * fps**3 / 10.0)
    return rte, jitter, accel


# --- plane matching ----------------------------------------------------------


@dataclass(frozen=True)
class PlaneMatch:
    predicted: int
    truth: int
    angle_deg: float
    offset_error: float


def match_planes(predicted: Sequence[Plane], truth: Sequence[Plane], offset_weight: float = 1.0) -> List[PlaneMatch]:
    """One-to-one assignment minimising normal angle (rad) plus weighted offset error."""
    if not predicted or not truth:
        return []
    angles = np.zeros((len(predicted), len(truth)))
    offsets = np.zeros_like(angles)
    for i, a in enumerate(predicted):
        for j, b in enumerate(truth):
            side = 1.0 if np.dot(a.normal, b.normal) >= 0 else -1.0
            angles[i, j] = a.angle_to(b)
            offsets[i, j] = abs(a.offset - side * b.offset)
    rows, cols = linear_sum_assignment(angles + offset_weight * offsets)
    return [
        PlaneMatch(int(i), int(j), math.degrees(angles[i, j]), float(offsets[i, j]))
        for i, j in zip(rows, cols)
    ]

def inlier_recall(points: ArrayLike, plane: Plane, tol: float) -> float:
    """Fraction of ``points`` within ``tol`` of ``plane``."""
    pts = as_points(points)
    if len(pts) == 0:
        raise EmptySet("Inlier recall needs at least one point")
    return float(np.mean(np.abs(plane.distances(pts)) <= tol))


# --- report --------------------------------------------------------------------


@dataclass
class EvaluationReport:
    cd_bi: Optional[float] = None
    cd_one_recon_to_gt: Optional[float] = None
    cd_one_gt_to_recon: Optional[float] = None
    non_pene: Optional[float] = None
    wa_mpjpe100: Optional[float] = None
    w_mpjpe100: Optional[float] = None
    rte: Optional[float] = None
    jitter: Optional[float] = None
    accel: Optional[float] = None
    mean_episode_length: Optional[float] = None
    mean_episode_return: Optional[float] = None
    reward_trace: List[float] = field(default_factory=list)
    termination_frame: Optional[int] = None
    config_hash: Optional[str] = None

    def metrics(self) -> Dict[str, Optional[float]]:
        return {key: getattr(self, key) for key in METRIC_UNITS}

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("reward_trace")
        data["mean_reward"] = float(np.mean(self.reward_trace)) if self.reward_trace else None
        data["units"] = dict(METRIC_UNITS)
        return data
