import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from geometry.core import (
    MIN_THICKNESS,
    PlanarPrimitive,
    Plane,
    Provenance,
    as_points,
    fit_plane_lsq,
    orthonormal_basis,
)
from geometry.rect import min_area_rect
from ingest.dataset import CameraTrack, PointMapSequence
from stages.association import SegmentGraph, UnionFind
from stages.base_stage import BaseStage
from utils.config import PipelineConfig
from utils.errors import DegenerateInput, FitError
from utils.parallel import parallel_map


logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]
HYPOTHESIS_CHUNK = 64


@dataclass(frozen=True, eq=False)
class GroupCloud:
    group_id: int
    points: NDArray  # (N, 3) union of member segment points over frames
    viewpoint: Optional[NDArray] = None  # mean camera center of the member frames

    @property
    def size(self) -> int:
        return len(self.points)


def gather_group_clouds(
    graph: SegmentGraph, points: PointMapSequence, cams: Optional[CameraTrack] = None
) -> List[GroupCloud]:
    clouds = []
    for group in range(graph.num_groups):
        members = graph.members(group)
        parts = [points.points[seg.frame].reshape(-1, 3)[seg.members] for seg in members]
        viewpoint = None
        if cams is not None:
            frames = sorted({seg.frame for seg in members})
            viewpoint = np.mean([cams.center(t) for t in frames], axis=0)
        clouds.append(GroupCloud(group, np.concatenate(parts).astype(np.float64), viewpoint))
    return clouds


def ransac_plane(
    points: ArrayLike,
    inlier_tol: float = 0.02,
    iters: int = 500,
    seed: Seed = 0,
    sample_cap: int = 20000,
) -> Tuple[Plane, NDArray]:
    """Best-consensus three-point plane, refit by least squares on its inliers.

    Hypotheses are scored on a seeded subsample of at most ``sample_cap`` points;
    the returned inlier indices are measured on the full cloud against the refit
    plane. Ties in consensus keep the earliest hypothesis.
    """
    pts = as_points(points)
    n = len(pts)
    if n < 3:
        raise DegenerateInput(f"RANSAC needs at least 3 points, got {n}")
    rng = np.random.default_rng(seed)
    scored = np.sort(rng.choice(n, sample_cap, replace=False)) if n > sample_cap else np.arange(n)
    sample = pts[scored]

    triples = np.array([rng.choice(n, 3, replace=False) for _ in range(iters)])
    p0, p1, p2 = pts[triples[:, 0]], pts[triples[:, 1]], pts[triples[:, 2]]
    e1, e2 = p1 - p0, p2 - p0
    normals = np.cross(e1, e2)
    lengths = np.linalg.norm(normals, axis=1)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    usable = lengths > 1e-9 * np.maximum(scale, 1e-300)
    if not usable.any():
        raise DegenerateInput("Every RANSAC sample was collinear")
    normals = normals[usable] / lengths[usable][:, None]
    offsets = np.sum(normals * p0[usable], axis=1)

    counts = np.empty(len(normals), dtype=np.int64)
    for start in range(0, len(normals), HYPOTHESIS_CHUNK):
        stop = start + HYPOTHESIS_CHUNK
        dist = np.abs(sample @ normals[start:stop].T - offsets[start:stop])
        counts[start:stop] = np.count_nonzero(dist <= inlier_tol, axis=0)
    best = int(np.argmax(counts))
    hypothesis = Plane(normals[best], offsets[best])

    inliers = np.flatnonzero(np.abs(hypothesis.distances(pts)) <= inlier_tol)
    try:
        plane = fit_plane_lsq(pts[inliers])
    except DegenerateInput:
        return hypothesis, inliers
    return plane, np.flatnonzero(np.abs(plane.distances(pts)) <= inlier_tol)


def build_primitive(
    plane: Plane,
    inliers: ArrayLike,
    viewpoint: Optional[ArrayLike] = None,
    provenance: Provenance = Provenance.FITTED,
    group_id: Optional[int] = None,
) -> PlanarPrimitive:
    """Thin cuboid whose -n face lies on ``plane`` and covers the inlier footprint.

    With a viewpoint the normal points away from it, so the slab extends behind
    the observed surface.
    """
    pts = as_points(inliers)
    if len(pts) < 3:
        raise DegenerateInput(f"Primitive needs at least 3 inliers, got {len(pts)}")
    if viewpoint is not None:
        normal, offset = plane.oriented_away_from(viewpoint)
    else:
        normal, offset = plane.normal, plane.offset
    e1, e2 = orthonormal_basis(normal)
    rect = min_area_rect(np.stack([pts @ e1, pts @ e2], axis=1))
    if rect.half_extents[1] <= 0:
        raise DegenerateInput("Inlier footprint has zero width")

    x_axis = rect.axes[0, 0] * e1 + rect.axes[0, 1] * e2
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(normal, x_axis)
    rotation = np.column_stack([x_axis, y_axis, normal])

    signed = pts @ normal - offset
    thickness = max(2.0 * float(np.max(np.abs(signed))), MIN_THICKNESS)
    face_center = offset * normal + rect.center[0] * e1 + rect.center[1] * e2
    return PlanarPrimitive(
        rotation=rotation,
        center=face_center + 0.5 * thickness * normal,
        extents=np.array([2.0 * rect.half_extents[0], 2.0 * rect.half_extents[1], thickness]),
        provenance=provenance,
        inlier_count=len(pts),
        fit_residual=float(math.sqrt(np.mean(signed**2))),
        group_id=group_id,
    )


def fill_ratio(prim: PlanarPrimitive, points: ArrayLike, cell: float = 0.05) -> float:
    """Share of occupancy-grid cells over the footprint rectangle that hold a point."""
    local = (as_points(points) - prim.center) @ prim.rotation
    sx, sy = prim.extents[0], prim.extents[1]
    nx, ny = max(1, math.ceil(sx / cell - 1e-9)), max(1, math.ceil(sy / cell - 1e-9))
    ix = np.clip(np.floor((local[:, 0] + 0.5 * sx) / cell).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((local[:, 1] + 0.5 * sy) / cell).astype(np.int64), 0, ny - 1)
    occupied = np.unique(ix * ny + iy).size
    return occupied / float(nx * ny)


def split_footprint(
    prim: PlanarPrimitive,
    inliers: ArrayLike,
    fill_min: float = 0.6,
    cell: float = 0.05,
    max_depth: int = 3,
    min_points: int = 50,
    viewpoint: Optional[ArrayLike] = None,
    depth: int = 0,
) -> List[PlanarPrimitive]:
    """Recursively halve a primitive whose footprint leaves the rectangle mostly empty.

    Inliers are split at the median along the primitive's long axis and each
    half is refit. A split that would leave a half with fewer than ``min_points``
    points, or that fails to fit, keeps the primitive whole.
    """
    pts = as_points(inliers)
    if depth >= max_depth or fill_ratio(prim, pts, cell) >= fill_min:
        return [prim]
    along = (pts - prim.center) @ prim.rotation[:, 0]
    left = along < np.median(along)
    halves = [pts[left], pts[~left]]
    if min(len(h) for h in halves) < min_points:
        return [prim]
    if viewpoint is None:
        viewpoint = prim.center - prim.normal

    parts = []
    try:
        for half in halves:
            child = build_primitive(fit_plane_lsq(half), half, viewpoint, prim.provenance, prim.group_id)
            parts.append((child, half))
    except FitError:
        return [prim]
    result: List[PlanarPrimitive] = []
    for child, half in parts:
        result.extend(split_footprint(child, half, fill_min, cell, max_depth, min_points, viewpoint, depth + 1))
    return result


@dataclass(frozen=True, eq=False)
class PlaneFit:
    group_ids: Tuple[int, ...]
    plane: Plane
    points: NDArray  # (N, 3) RANSAC inliers
    viewpoint: Optional[NDArray] = None


def _touching(a: NDArray, b: NDArray, gap: float, cap: int = 2000) -> bool:
    stride = max(1, len(b) // cap)
    dist, _ = cKDTree(a).query(b[::stride], k=1, distance_upper_bound=gap)
    return bool(np.isfinite(dist).any())


def coplanar_sets(fits: Sequence[PlaneFit], angle_deg: float, offset_tol: float, gap: float) -> List[List[int]]:
    """Partition fits into sets of touching fragments of one plane.

    Two fits join when their normals agree within ``angle_deg``, each inlier
    centroid lies within ``offset_tol`` of the other plane, and the inlier
    clouds come within ``gap`` of each other. Sets are ordered by first member.
    """
    cos_min = math.cos(math.radians(angle_deg))
    centroids = [fit.points.mean(axis=0) for fit in fits]
    forest = UnionFind(len(fits))
    for i, j in itertools.combinations(range(len(fits)), 2):
        a, b = fits[i], fits[j]
        if forest.find(i) == forest.find(j):
            continue
        if abs(float(np.dot(a.plane.normal, b.plane.normal))) < cos_min:
            continue
        if abs(a.plane.distances(centroids[j])[0]) > offset_tol or abs(b.plane.distances(centroids[i])[0]) > offset_tol:
            continue
        if _touching(a.points, b.points, gap):
            forest.union(i, j)
    labels = forest.labels()
    return [np.flatnonzero(labels == g).tolist() for g in range(int(labels.max()) + 1)] if len(fits) else []


class PrimitiveFitStage(BaseStage):
    def __init__(self, config: PipelineConfig):
        super().__init__(role="PrimitiveFit", config=config)

    def fit_plane(self, cloud: GroupCloud) -> Optional[PlaneFit]:
        cfg = self.config
        if cloud.size < cfg.ransac_min_points:
            logger.debug("Group %d skipped: %d points", cloud.group_id, cloud.size)
            return None
        try:
            plane, inliers = ransac_plane(
                cloud.points, cfg.ransac_inlier_tol, cfg.ransac_iters, (cfg.seed, cloud.group_id), cfg.ransac_sample_cap
            )
        except FitError as err:
            logger.warning("Group %d skipped: %s", cloud.group_id, err)
            return None
        if inliers.size < cfg.ransac_min_points:
            logger.debug("Group %d skipped: %d inliers", cloud.group_id, inliers.size)
            return None
        return PlaneFit((cloud.group_id,), plane, cloud.points[inliers], cloud.viewpoint)

    def merge_fits(self, fits: Sequence[PlaneFit]) -> List[PlaneFit]:
        """Refit each set of coplanar touching fits as one plane."""
        cfg = self.config
        if not cfg.coplanar_merge:
            return list(fits)
        merged = []
        for members in coplanar_sets(fits, cfg.coplanar_angle_deg, cfg.coplanar_offset, cfg.coplanar_gap):
            if len(members) == 1:
                merged.append(fits[members[0]])
                continue
            parts = [fits[i] for i in members]
            ids = tuple(sorted(g for fit in parts for g in fit.group_ids))
            points = np.concatenate([fit.points for fit in parts])
            views = [fit.viewpoint for fit in parts if fit.viewpoint is not None]
            try:
                plane, inliers = ransac_plane(
                    points, cfg.ransac_inlier_tol, cfg.ransac_iters, (cfg.seed, ids[0]), cfg.ransac_sample_cap
                )
            except FitError as err:
                logger.warning("Groups %s kept apart: %s", ids, err)
                merged.extend(parts)
                continue
            logger.debug("Merged coplanar groups %s", ids)
            merged.append(PlaneFit(ids, plane, points[inliers], np.mean(views, axis=0) if views else None))
        return merged

    def build(self, fit: PlaneFit) -> List[PlanarPrimitive]:
        cfg = self.config
        try:
            prim = build_primitive(fit.plane, fit.points, fit.viewpoint, Provenance.FITTED, fit.group_ids[0])
        except FitError as err:
            logger.warning("Group %d skipped: %s", fit.group_ids[0], err)
            return []
        return split_footprint(
            prim,
            fit.points,
            cfg.fill_min,
            cfg.fill_cell,
            cfg.split_max_depth,
            cfg.ransac_min_points,
            fit.viewpoint,
        )

    def fit_group(self, cloud: GroupCloud) -> List[PlanarPrimitive]:
        fit = self.fit_plane(cloud)
        return self.build(fit) if fit is not None else []

    def process(
        self, graph: SegmentGraph, points: PointMapSequence, cams: Optional[CameraTrack] = None
    ) -> Tuple[Any, Dict[str, Any]]:
        clouds = gather_group_clouds(graph, points, cams)
        fits = [fit for fit in parallel_map(self.fit_plane, clouds, self.config.workers) if fit is not None]
        merged = self.merge_fits(fits)
        built = parallel_map(self.build, merged, self.config.workers)
        primitives = [prim for batch in built for prim in batch]
        stats = {
            "groups": len(clouds),
            "fitted_groups": len(fits),
            "merged_groups": len(merged),
            "primitives": len(primitives),
        }
        return primitives, stats
