import logging
import math
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from ingest.dataset import CameraTrack, MotionSequence, PointMapSequence
from utils.errors import InsufficientOverlap, ShapeMismatch
from utils.parallel import parallel_map


logger = logging.getLogger(__name__)

HUMAN_MASK_TAG = "human_mask"
SPATIAL_FILTER_PREFIX = "spatial_filter"


def spatial_filter_tag(percentile: float, pelvis_radius: float) -> str:
    return f"{SPATIAL_FILTER_PREFIX}:p={float(percentile)!r},r={float(pelvis_radius)!r}"


def nearest_rank_percentile(values: NDArray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = values.size
    rank = max(1, math.ceil(percentile / 100.0 * n))
    kth = min(rank, n) - 1
    return float(np.partition(values, kth)[kth])


def recover_metric_scale(
    points: PointMapSequence,
    motion: MotionSequence,
    human_masks: NDArray,
    cams: CameraTrack,
    human_depth: Optional[NDArray] = None,
    statistic: str = "median",
    min_pixels: int = 100,
) -> float:
    """Scale factor that makes point-map depth on human pixels match the body depth.

    ``human_depth`` is the camera-frame depth of the rendered body mesh per pixel;
    without it the pelvis depth of each frame stands in for every human pixel.
    """
    masks = np.asarray(human_masks, dtype=bool)
    if masks.shape != points.valid.shape:
        raise ShapeMismatch(f"Human masks {masks.shape} do not match point maps {points.valid.shape}")

    ratios = []
    best_frame_pixels = 0
    for t in range(points.num_frames):
        overlap = masks[t] & points.valid[t]
        if human_depth is not None:
            overlap &= human_depth[t] > 0
        if not overlap.any():
            continue
        map_depth = cams.depth(points.points[t][overlap].astype(np.float64), t)
        if human_depth is not None:
            body_depth = human_depth[t][overlap].astype(np.float64)
        else:
            body_depth = np.full(map_depth.shape, float(cams.depth(motion.pelvis[t], t)))
        usable = (map_depth > 0) & (body_depth > 0)
        best_frame_pixels = max(best_frame_pixels, int(usable.sum()))
        ratios.append(body_depth[usable] / map_depth[usable])

    if best_frame_pixels < min_pixels:
        raise InsufficientOverlap(
            f"No frame has {min_pixels} human pixels with valid point-map depth (best: {best_frame_pixels})"
        )
    all_ratios = np.concatenate(ratios)
    scale = float(np.median(all_ratios) if statistic == "median" else np.mean(all_ratios))
    logger.info("Recovered metric scale %.6f from %d human pixels", scale, all_ratios.size)
    return scale


def apply_metric_scale(
    points: PointMapSequence, cams: CameraTrack, scale: float
) -> Tuple[PointMapSequence, CameraTrack]:
    scaled = (points.points * scale).astype(points.points.dtype)
    return PointMapSequence(scaled, points.valid, points.filters_applied), cams.scaled(scale)


def mask_human_pixels(points: PointMapSequence, human_masks: NDArray) -> PointMapSequence:
    """Invalidate pixels covered by the human; body points are not scene geometry."""
    if HUMAN_MASK_TAG in points.filters_applied:
        return points
    masks = np.asarray(human_masks, dtype=bool)
    return points.with_valid(points.valid & ~masks, HUMAN_MASK_TAG)


def filter_frame(
    frame_points: NDArray,
    frame_valid: NDArray,
    cams: CameraTrack,
    t: int,
    pelvis: NDArray,
    percentile: float,
    pelvis_radius: float,
) -> NDArray:
    valid = frame_valid.copy()
    if not valid.any():
        return valid
    pts = frame_points[valid].astype(np.float64)
    depth = cams.depth(pts, t)
    threshold = nearest_rank_percentile(depth, percentile)
    keep = (depth <= threshold) & (np.linalg.norm(pts - pelvis, axis=1) <= pelvis_radius)
    valid[valid] = keep
    return valid


def filter_points(
    points: PointMapSequence,
    motion: MotionSequence,
    cams: CameraTrack,
    percentile: float = 95.0,
    pelvis_radius: float = 2.5,
    workers: int = 1,
) -> PointMapSequence:
    """Drop points beyond the per-frame depth percentile or too far from the pelvis.

    Applying the filter twice with the same parameters returns the sequence
    unchanged; the applied parameters travel with the point maps through
    ``save_dataset``. A pass with other parameters filters the remaining points.
    """
    tag = spatial_filter_tag(percentile, pelvis_radius)
    if tag in points.filters_applied:
        return points
    earlier = [f for f in points.filters_applied if f.startswith(SPATIAL_FILTER_PREFIX)]
    if earlier:
        logger.warning("Point maps already carry %s; filtering again with %s", ", ".join(earlier), tag)
    if motion.num_frames != points.num_frames:
        raise ShapeMismatch(f"Motion has {motion.num_frames} frames, point maps have {points.num_frames}")

    def run(t: int) -> NDArray:
        return filter_frame(
            points.points[t], points.valid[t], cams, t, motion.pelvis[t], percentile, pelvis_radius
        )

    valid = np.stack(parallel_map(run, range(points.num_frames), workers))
    removed = int(points.valid.sum() - valid.sum())
    logger.info("Spatial filter removed %d points", removed)
    return points.with_valid(valid, tag)
