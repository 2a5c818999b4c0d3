import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import ConvexHull, QhullError

from utils.errors import DegenerateInput


@dataclass(frozen=True, eq=False)
class Rect2D:
    angle: float
    center: NDArray[np.float64]
    half_extents: NDArray[np.float64]

    @property
    def axes(self) -> NDArray[np.float64]:
        """Rows are the rectangle's x and y axes."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, s], [-s, c]])

    @property
    def area(self) -> float:
        return float(4.0 * self.half_extents[0] * self.half_extents[1])


def convex_hull_2d(points2d: ArrayLike) -> NDArray[np.float64]:
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateInput(f"Rectangle fit needs at least 3 points, got {len(pts)}")
    try:
        hull = ConvexHull(pts)
    except QhullError as err:
        raise DegenerateInput(f"Points are collinear: {err}") from err
    return pts[hull.vertices]


def min_area_rect(points2d: ArrayLike, tol: float = 1e-12) -> Rect2D:
    """Minimum-area enclosing rectangle over the hull edge directions.

    One side of the optimal rectangle is collinear with a hull edge, so every edge
    direction (folded into [0, pi/2)) is scored and the smallest area kept. The
    returned x axis is the longer side; the angle lies in [0, pi).
    """
    hull = convex_hull_2d(points2d)
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2)
    angles = np.where(angles >= math.pi / 2 - 1e-15, 0.0, angles)

    cos, sin = np.cos(angles), np.sin(angles)
    # per candidate: projections of every hull point on u = (c, s) and v = (-s, c)
    proj_u = np.outer(cos, hull[:, 0]) + np.outer(sin, hull[:, 1])
    proj_v = np.outer(-sin, hull[:, 0]) + np.outer(cos, hull[:, 1])
    min_u, max_u = proj_u.min(axis=1), proj_u.max(axis=1)
    min_v, max_v = proj_v.min(axis=1), proj_v.max(axis=1)
    areas = (max_u - min_u) * (max_v - min_v)
    best = int(np.argmin(areas))

    theta = float(angles[best])
    ext_u = 0.5 * (max_u[best] - min_u[best])
    ext_v = 0.5 * (max_v[best] - min_v[best])
    mid_u = 0.5 * (max_u[best] + min_u[best])
    mid_v = 0.5 * (max_v[best] + min_v[best])
    c, s = math.cos(theta), math.sin(theta)
    center = np.array([mid_u * c - mid_v * s, mid_u * s + mid_v * c])

    if ext_u + tol >= ext_v:
        return Rect2D(theta, center, np.array([ext_u, ext_v]))
    return Rect2D(theta + math.pi / 2, center, np.array([ext_v, ext_u]))
