import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from PIL import Image
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ingest.dataset import CameraTrack, PointMapSequence
from stages.base_stage import BaseStage
from utils.config import PipelineConfig
from utils.errors import InsufficientPoints
from utils.parallel import parallel_map


Seed = Union[int, Sequence[int]]


@dataclass(frozen=True, eq=False)
class NormalMap:
    normals: NDArray  # (T, H, W, 3) unit where valid
    valid: NDArray  # (T, H, W) bool


@dataclass(frozen=True, eq=False)
class Segment:
    frame: int
    members: NDArray  # sorted flat pixel indices into the frame
    mean_normal: NDArray
    centroid: NDArray
    label: int = 0  # normal cluster the segment came from

    @property
    def size(self) -> int:
        return int(self.members.size)


def _shift(array: NDArray, offset: int, axis: int, fill: Any) -> NDArray:
    """out[i] = array[i + offset] along ``axis``; out-of-range entries take ``fill``."""
    out = np.full_like(array, fill)
    n = array.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * array.ndim
    dst = [slice(None)] * array.ndim
    if offset > 0:
        src[axis], dst[axis] = slice(offset, None), slice(None, n - offset)
    else:
        src[axis], dst[axis] = slice(None, n + offset), slice(-offset, None)
    out[tuple(dst)] = array[tuple(src)]
    return out


def _window(array: NDArray, radius: int, fill: Any) -> NDArray:
    """Copies of ``array`` shifted to every offset of a (2r+1)^2 pixel window, stacked on axis 0."""
    shifted = []
    for dv in range(-radius, radius + 1):
        rows = _shift(array, dv, 0, fill)
        shifted.extend(_shift(rows, du, 1, fill) for du in range(-radius, radius + 1))
    return np.stack(shifted)


def repair_depth_outliers(
    points: NDArray,
    valid: NDArray,
    camera_center: NDArray,
    view_axis: NDArray,
    ratio: float,
    radius: int = 1,
) -> Tuple[NDArray, NDArray]:
    """Replace isolated wild depths by the local median.

    Inverse depth along ``view_axis`` is median-filtered over valid pixels of a
    (2r+1)^2 window; it is affine on a plane, so planar interiors keep their
    value. A valid pixel whose depth differs from the filtered one by more than
    ``ratio`` of it moves along its ray to the filtered depth and is reported as
    rejected. Pixels with less than a majority of valid window entries are left
    alone.
    """
    offsets = points.astype(np.float64) - camera_center
    depth = offsets @ view_axis
    usable = valid & (depth > 0)
    safe = np.where(usable, depth, 1.0)
    window = _window(np.where(usable, 1.0 / safe, np.nan), radius, np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        median = np.nanmedian(window, axis=0)
    enough = usable & (np.isfinite(window).sum(axis=0) * 2 > window.shape[0])
    filtered = np.where(enough, 1.0 / np.where(enough, median, 1.0), safe)
    rejected = enough & (np.abs(safe - filtered) > ratio * filtered)
    moved = camera_center + offsets * (filtered / safe)[..., None]
    return np.where(rejected[..., None], moved, points), rejected


def smooth_normals(normals: NDArray, ok: NDArray, radius: int = 1) -> NDArray:
    """Renormalized sum of the valid unit normals in each pixel's (2r+1)^2 window; zero where not ``ok``."""
    total = _window(np.where(ok[..., None], normals, 0.0), radius, 0.0).sum(axis=0)
    length = np.linalg.norm(total, axis=-1)
    keep = ok & (length > 1e-12)
    return np.where(keep[..., None], total / np.where(keep, length, 1.0)[..., None], 0.0)


def estimate_frame_normals(
    points: NDArray,
    valid: NDArray,
    camera_center: NDArray,
    step: int = 1,
    crease_angle_deg: float = 20.0,
    depth_jump_ratio: float = 0.1,
    outlier_ratio: Optional[float] = None,
    smoothing: int = 0,
    view_axis: Optional[NDArray] = None,
) -> Tuple[NDArray, NDArray]:
    """Finite-difference normals on one organized point grid.

    Central differences inside the grid, one-sided at the borders. A pixel is
    invalid when any stencil neighbour is invalid, when a stencil step exceeds
    ``depth_jump_ratio`` times its range from the camera, or when the forward and
    backward one-sided normals disagree by more than ``crease_angle_deg``.

    With ``outlier_ratio`` set, wild depths are first repaired by
    ``repair_depth_outliers`` along ``view_axis`` (the mean viewing direction
    when omitted); repaired pixels feed their neighbours' stencils but are
    themselves invalid. ``smoothing`` > 0 averages the valid normals over a
    window of that radius.
    """
    rejected = np.zeros_like(valid)
    if outlier_ratio is not None and valid.any():
        if view_axis is None:
            view_axis = np.mean(points[valid].astype(np.float64) - camera_center, axis=0)
        view_axis = np.asarray(view_axis, dtype=np.float64)
        view_axis = view_axis / np.linalg.norm(view_axis)
        points, rejected = repair_depth_outliers(points, valid, camera_center, view_axis, outlier_ratio)
    pts = np.where(valid[..., None], points.astype(np.float64), 0.0)
    rng_dist = np.linalg.norm(pts - camera_center, axis=-1)
    ok = valid.copy()
    max_step = depth_jump_ratio * rng_dist * step

    tangents = []
    one_sided = []
    for axis in (1, 0):  # u (columns) then v (rows)
        fwd_pts = _shift(pts, step, axis, 0.0)
        bwd_pts = _shift(pts, -step, axis, 0.0)
        fwd_in = _shift(np.ones_like(valid), step, axis, False)
        bwd_in = _shift(np.ones_like(valid), -step, axis, False)
        fwd_ok = _shift(valid, step, axis, False)
        bwd_ok = _shift(valid, -step, axis, False)
        ok &= np.where(fwd_in, fwd_ok, True) & np.where(bwd_in, bwd_ok, True) & (fwd_in | bwd_in)

        fwd = fwd_pts - pts
        bwd = pts - bwd_pts
        ok &= np.where(fwd_in, np.linalg.norm(fwd, axis=-1) <= max_step, True)
        ok &= np.where(bwd_in, np.linalg.norm(bwd, axis=-1) <= max_step, True)

        both = (fwd_in & bwd_in)[..., None]
        tangent = np.where(both, fwd + bwd, np.where(fwd_in[..., None], fwd, bwd))
        tangents.append(tangent)
        one_sided.append((np.where(fwd_in[..., None], fwd, 0.0), np.where(bwd_in[..., None], bwd, 0.0)))

    normals = np.cross(tangents[0], tangents[1])
    length = np.linalg.norm(normals, axis=-1)
    ok &= length > 1e-12
    normals = normals / np.where(length > 0, length, 1.0)[..., None]

    n_fwd = np.cross(one_sided[0][0], one_sided[1][0])
    n_bwd = np.cross(one_sided[0][1], one_sided[1][1])
    len_fwd = np.linalg.norm(n_fwd, axis=-1)
    len_bwd = np.linalg.norm(n_bwd, axis=-1)
    comparable = (len_fwd > 1e-12) & (len_bwd > 1e-12)
    cos = np.sum(n_fwd * n_bwd, axis=-1) / np.where(comparable, len_fwd * len_bwd, 1.0)
    ok &= ~comparable | (cos >= math.cos(math.radians(crease_angle_deg)))

    to_camera = camera_center - pts
    flip = np.sum(normals * to_camera, axis=-1) < 0
    normals[flip] *= -1.0
    ok &= ~rejected
    normals[~ok] = 0.0
    if smoothing > 0:
        normals = smooth_normals(normals, ok, smoothing)
        ok &= np.linalg.norm(normals, axis=-1) > 0
    return normals, ok


def estimate_normals(
    points: PointMapSequence,
    cams: CameraTrack,
    step: int = 1,
    crease_angle_deg: float = 20.0,
    depth_jump_ratio: float = 0.1,
    workers: int = 1,
    outlier_ratio: Optional[float] = None,
    smoothing: int = 0,
) -> NormalMap:
    def run(t: int) -> Tuple[NDArray, NDArray]:
        return estimate_frame_normals(
            points.points[t],
            points.valid[t],
            cams.center(t),
            step,
            crease_angle_deg,
            depth_jump_ratio,
            outlier_ratio,
            smoothing,
            view_axis=cams.poses[t].rotation.matrix()[:, 2],
        )

    results = parallel_map(run, range(points.num_frames), workers)
    return NormalMap(np.stack([r[0] for r in results]), np.stack([r[1] for r in results]))


def cluster_normals(
    normals: NDArray,
    valid: NDArray,
    k: int,
    seed: Seed = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    merge_deg: Optional[float] = None,
) -> NDArray:
    """Spherical K-means on one frame's normals.

    Returns per-pixel labels in 1..k (0 for invalid pixels). Seeding is
    farthest-point in cosine distance from a seeded first pick; seeding stops
    early once every remaining normal coincides with a centroid, so ``k`` is an
    upper bound on the number of labels used. With ``merge_deg``, centroids
    chained by angles below it share one label.
    """
    x = normals[valid].astype(np.float64)
    if len(x) < k:
        raise InsufficientPoints(f"Need at least {k} valid normals, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = [x[int(rng.integers(len(x)))]]
    nearest = 1.0 - x @ centroids[0]
    while len(centroids) < k:
        idx = int(np.argmax(nearest))
        if nearest[idx] <= tol:
            break
        centroids.append(x[idx])
        nearest = np.minimum(nearest, 1.0 - x @ x[idx])
    centers = np.array(centroids)

    for _ in range(max_iter):
        assign = np.argmax(x @ centers.T, axis=1)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        norms = np.linalg.norm(sums, axis=1)
        updated = np.where(norms[:, None] > 1e-12, sums / np.where(norms > 0, norms, 1.0)[:, None], centers)
        moved = float(np.max(np.linalg.norm(updated - centers, axis=1)))
        centers = updated
        if moved < tol:
            break

    component = np.arange(len(centers))
    if merge_deg:
        linked = coo_matrix(centers @ centers.T >= math.cos(math.radians(merge_deg)))
        _, component = connected_components(linked, directed=False)

    labels = np.zeros(valid.shape, dtype=np.int32)
    labels[valid] = component[np.argmax(x @ centers.T, axis=1)] + 1
    return labels


def dbscan(points: NDArray, eps: float, min_points: int) -> NDArray:
    """Density clustering over 3D positions; -1 marks noise.

    A point is core when at least ``min_points`` points (itself included) lie
    within ``eps``. Core points closer than ``eps`` share a cluster; a border
    point joins the cluster of its lowest-index core neighbour. Cluster ids are
    ordered by each cluster's smallest member index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    counts = np.bincount(pairs.ravel(), minlength=n) + 1
    core = counts >= min_points
    if not core.any():
        return labels

    core_pairs = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    graph = coo_matrix(
        (np.ones(len(core_pairs)), (core_pairs[:, 0], core_pairs[:, 1])), shape=(n, n)
    )
    _, component = connected_components(graph, directed=False)
    labels[core] = component[core]

    # border points: non-core with a core neighbour
    first_core = np.full(n, n, dtype=np.int64)
    for a, b in ((0, 1), (1, 0)):
        mask = core[pairs[:, a]] & ~core[pairs[:, b]]
        np.minimum.at(first_core, pairs[mask, b], pairs[mask, a])
    border = first_core < n
    labels[border] = component[first_core[border]]

    clustered = labels >= 0
    _, first_member = np.unique(labels[clustered], return_index=True)
    order_keys = np.flatnonzero(clustered)[first_member]
    ranked = labels[order_keys][np.argsort(order_keys)]
    remap = {int(old): new for new, old in enumerate(ranked)}
    labels[clustered] = [remap[int(v)] for v in labels[clustered]]
    return labels


def split_spatial(
    frame_points: NDArray,
    labels: NDArray,
    normals: NDArray,
    frame: int,
    eps: float,
    min_points: int,
    min_size: int,
) -> List[Segment]:
    """Split each normal cluster into spatially connected segments."""
    flat_points = frame_points.reshape(-1, 3).astype(np.float64)
    flat_labels = labels.reshape(-1)
    flat_normals = normals.reshape(-1, 3)
    segments: List[Segment] = []
    for k in np.unique(flat_labels):
        if k <= 0:
            continue
        idx = np.flatnonzero(flat_labels == k)
        spatial = dbscan(flat_points[idx], eps, min_points)
        for cluster in range(int(spatial.max()) + 1 if spatial.size else 0):
            members = idx[spatial == cluster]
            if members.size < min_size:
                continue
            mean = flat_normals[members].sum(axis=0)
            mean /= np.linalg.norm(mean)
            segments.append(
                Segment(frame, members, mean, flat_points[members].mean(axis=0), int(k))
            )
    return segments


def segment_label_image(segments: Sequence[Segment], height: int, width: int) -> NDArray:
    """Per-pixel segment index + 1, 0 for unsegmented pixels."""
    image = np.zeros(height * width, dtype=np.int32)
    for idx, seg in enumerate(segments):
        image[seg.members] = idx + 1
    return image.reshape(height, width)


def write_segmentation_debug(directory: str, segments_by_frame: Sequence[Sequence[Segment]], height: int, width: int) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    table = []
    for t, segments in enumerate(segments_by_frame):
        labels = np.clip(segment_label_image(segments, height, width), 0, 255).astype(np.uint8)
        Image.fromarray(labels).save(root / f"labels_{t:04d}.pgm")
        for idx, seg in enumerate(segments):
            table.append(
                {
                    "frame": t,
                    "segment": idx,
                    "normal_cluster": seg.label,
                    "size": seg.size,
                    "mean_normal": [float(v) for v in seg.mean_normal],
                    "centroid": [float(v) for v in seg.centroid],
                }
            )
    (root / "segments.json").write_text(json.dumps(table, indent=2), encoding="utf-8")


class SegmentationStage(BaseStage):
    def __init__(self, config: PipelineConfig):
        super().__init__(role="Segmentation", config=config)

    def segment_frame(self, points: PointMapSequence, normal_map: NormalMap, t: int) -> List[Segment]:
        cfg = self.config
        min_points, min_size = cfg.scaled_segment_sizes(points.height, points.width)
        normals, valid = normal_map.normals[t], normal_map.valid[t]
        if valid.sum() < cfg.normal_clusters:
            return []
        labels = cluster_normals(
            normals,
            valid,
            cfg.normal_clusters,
            seed=(cfg.seed, t),
            max_iter=cfg.kmeans_max_iter,
            tol=cfg.kmeans_tol,
            merge_deg=cfg.normal_merge_deg,
        )
        return split_spatial(points.points[t], labels, normals, t, cfg.dbscan_eps, min_points, min_size)

    def process(self, points: PointMapSequence, cams: CameraTrack) -> Tuple[Any, Dict[str, Any]]:
        cfg = self.config
        normal_map = estimate_normals(
            points,
            cams,
            cfg.normal_step,
            cfg.crease_angle_deg,
            cfg.depth_jump_ratio,
            cfg.workers,
            cfg.normal_outlier_ratio,
            cfg.normal_smoothing,
        )
        segments = parallel_map(
            lambda t: self.segment_frame(points, normal_map, t), range(points.num_frames), cfg.workers
        )
        stats = {
            "segments": sum(len(s) for s in segments),
            "valid_normals": int(normal_map.valid.sum()),
        }
        return (normal_map, segments), stats
