from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from utils.errors import DegenerateInput


Vec3 = NDArray[np.float64]

UNIT_TOL = 1e-9
TIE_TOL = 1e-12
MIN_THICKNESS = 0.05


def as_vec3(value: ArrayLike) -> Vec3:
    vec = np.asarray(value, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"Vec3 has non-finite components: {vec}")
    return vec


def as_points(points: ArrayLike) -> NDArray[np.float64]:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    return arr.reshape(-1, 3)


def sign_canonical(vec: NDArray[np.float64], tol: float = UNIT_TOL) -> NDArray[np.float64]:
    """Flip ``vec`` so its first component with magnitude above ``tol`` is positive.

    Choosing between ``v`` and ``-v`` this way is the tolerant form of picking the
    lexicographically larger of the two.
    """
    for component in vec:
        if abs(component) > tol:
            return vec if component > 0 else -vec
    return vec


# Quaternion arrays: [..., 4] in (w, x, y, z) order, Hamilton product.


def quat_multiply(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: ArrayLike) -> NDArray[np.float64]:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_canonical(q: ArrayLike) -> NDArray[np.float64]:
    """Normalize and resolve the double cover: w >= 0, and for w == 0 the first
    non-zero vector component is positive."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("Cannot normalize a zero quaternion")
    # already-unit inputs pass through untouched so repeated loads stay bit-exact
    q = q / np.where(np.abs(norm - 1.0) <= 1e-15, 1.0, norm)
    flat = q.reshape(-1, 4).copy()
    flat[flat[:, 0] < -TIE_TOL] *= -1.0
    ties = np.flatnonzero(np.abs(flat[:, 0]) <= TIE_TOL)
    for idx in ties:
        flat[idx, 0] = 0.0
        flat[idx, 1:] = sign_canonical(flat[idx, 1:], tol=TIE_TOL)
    return flat.reshape(q.shape)


def quat_rotate(q: ArrayLike, v: ArrayLike) -> NDArray[np.float64]:
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_angle(q: ArrayLike) -> NDArray[np.float64]:
    """Rotation angle in [0, pi] of unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w = np.clip(np.abs(q[..., 0]), 0.0, 1.0)
    vec_norm = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(vec_norm, w)


def quat_to_matrix(q: ArrayLike) -> NDArray[np.float64]:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_quat(matrix: ArrayLike) -> NDArray[np.float64]:
    m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * math.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_canonical(np.array(q))


def quat_sub_array(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    """Relative rotation r = b^-1 (x) a for stacks of unit quaternions."""
    return quat_canonical(quat_multiply(quat_conjugate(b), a))


@dataclass(frozen=True, eq=False)
class UnitQuat:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self) -> None:
        raw = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise ValueError(f"UnitQuat has non-finite components: {raw}")
        if abs(np.linalg.norm(raw) - 1.0) > UNIT_TOL:
            raise ValueError(f"UnitQuat is not unit-norm: |q| = {np.linalg.norm(raw)}")
        canon = quat_canonical(raw)
        for name, value in zip("wxyz", canon):
            object.__setattr__(self, name, float(value))

    @classmethod
    def from_array(cls, values: ArrayLike) -> "UnitQuat":
        q = quat_canonical(np.asarray(values, dtype=np.float64).reshape(4))
        return cls(*q)

    @classmethod
    def identity(cls) -> "UnitQuat":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis: ArrayLike, angle: float) -> "UnitQuat":
        axis = as_vec3(axis)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls.from_array(np.concatenate([[math.cos(half)], math.sin(half) * axis]))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "UnitQuat":
        return cls.from_array(matrix_to_quat(matrix))

    def array(self) -> NDArray[np.float64]:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def matrix(self) -> NDArray[np.float64]:
        return quat_to_matrix(self.array())

    def inverse(self) -> "UnitQuat":
        return UnitQuat.from_array(quat_conjugate(self.array()))

    def rotate(self, v: ArrayLike) -> NDArray[np.float64]:
        return quat_rotate(self.array(), v)

    def angle(self) -> float:
        return float(quat_angle(self.array()))

    def __mul__(self, other: "UnitQuat") -> "UnitQuat":
        return UnitQuat.from_array(quat_multiply(self.array(), other.array()))

    def is_close(self, other: "UnitQuat", tol: float = UNIT_TOL) -> bool:
        return bool(np.allclose(self.array(), other.array(), atol=tol))


def quat_sub(a: UnitQuat, b: UnitQuat) -> UnitQuat:
    """Relative rotation r with b (x) r = a, i.e. r = b^-1 (x) a."""
    return UnitQuat.from_array(quat_sub_array(a.array(), b.array()))


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: UnitQuat = field(default_factory=UnitQuat.identity)
    translation: Vec3 = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "translation", as_vec3(self.translation))

    @classmethod
    def from_array7(cls, values: ArrayLike) -> "SE3":
        arr = np.asarray(values, dtype=np.float64).reshape(7)
        return cls(UnitQuat.from_array(arr[:4]), arr[4:])

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "SE3":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(UnitQuat.from_matrix(m[:3, :3]), m[:3, 3])

    def array7(self) -> NDArray[np.float64]:
        return np.concatenate([self.rotation.array(), self.translation])

    def matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.matrix().T + self.translation

    def inverse(self) -> "SE3":
        inv = self.rotation.inverse()
        return SE3(inv, -inv.rotate(self.translation))

    def __mul__(self, other: "SE3") -> "SE3":
        return SE3(self.rotation * other.rotation, self.apply(other.translation))


@dataclass(frozen=True, eq=False)
class Plane:
    """The plane {p : normal . p = offset}, stored in canonical sign."""

    normal: Vec3
    offset: float

    def __post_init__(self) -> None:
        normal = as_vec3(self.normal)
        norm = float(np.linalg.norm(normal))
        if norm < 1e-12:
            raise DegenerateInput("Plane normal has zero length")
        normal = normal / norm
        offset = float(self.offset) / norm
        if abs(offset) <= TIE_TOL:
            flipped = sign_canonical(normal)
            if flipped is not normal:
                offset = -offset
            normal = flipped
        elif offset < 0:
            normal, offset = -normal, -offset
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", offset)

    def canonical(self) -> "Plane":
        return Plane(self.normal, self.offset)

    def distances(self, points: ArrayLike) -> NDArray[np.float64]:
        return as_points(points) @ self.normal - self.offset

    def project(self, points: ArrayLike) -> NDArray[np.float64]:
        pts = as_points(points)
        return pts - np.outer(self.distances(pts), self.normal)

    def angle_to(self, other: "Plane") -> float:
        """Unsigned angle between the two normals' lines, radians."""
        cos = abs(float(np.dot(self.normal, other.normal)))
        return math.acos(min(1.0, cos))

    def oriented_away_from(self, viewpoint: ArrayLike) -> Tuple[Vec3, float]:
        """Normal/offset pair flipped so ``viewpoint`` lies on the negative side."""
        if float(np.dot(self.normal, as_vec3(viewpoint))) - self.offset > 0:
            return -self.normal, -self.offset
        return self.normal, self.offset


class Provenance(str, Enum):
    FITTED = "fitted"
    CONTACT_COMPLETED = "contact_completed"


@dataclass(frozen=True, eq=False)
class PlanarPrimitive:
    """Oriented cuboid with rotation columns [x y n], center and full extents."""

    rotation: NDArray[np.float64]
    center: Vec3
    extents: Vec3
    provenance: Provenance = Provenance.FITTED
    inlier_count: int = 0
    fit_residual: float = 0.0
    group_id: Optional[int] = None

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9):
            raise ValueError("Primitive rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise ValueError("Primitive rotation is not right-handed")
        extents = as_vec3(self.extents)
        if np.any(extents <= 0):
            raise ValueError(f"Primitive extents must be positive: {extents}")
        provenance = Provenance(self.provenance)
        if provenance is Provenance.CONTACT_COMPLETED and extents[2] < MIN_THICKNESS:
            raise ValueError("Contact-completed primitive thinner than the minimum thickness")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "center", as_vec3(self.center))
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "provenance", provenance)

    @property
    def normal(self) -> Vec3:
        return self.rotation[:, 2]

    @property
    def half_extents(self) -> Vec3:
        return 0.5 * self.extents

    @property
    def observed_plane(self) -> Plane:
        """Plane of the face on the -n side, the surface the primitive was fitted to."""
        face_point = self.center - self.half_extents[2] * self.normal
        return Plane(self.normal, float(np.dot(self.normal, face_point)))

    def quaternion(self) -> UnitQuat:
        return UnitQuat.from_matrix(self.rotation)

    def corners(self) -> NDArray[np.float64]:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
        )
        return (signs * self.half_extents) @ self.rotation.T + self.center

    def surface_area(self) -> float:
        sx, sy, sz = self.extents
        return float(2.0 * (sx * sy + sx * sz + sy * sz))


def point_plane_distance(p: ArrayLike, plane: Plane) -> float:
    return float(np.dot(plane.normal, as_vec3(p)) - plane.offset)


def cuboid_signed_distances(points: ArrayLike, prim: PlanarPrimitive) -> NDArray[np.float64]:
    """Exact signed distance of each point to the box surface, negative inside."""
    local = (as_points(points) - prim.center) @ prim.rotation
    q = np.abs(local) - prim.half_extents
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def cuboid_signed_distance(p: ArrayLike, prim: PlanarPrimitive) -> float:
    return float(cuboid_signed_distances(as_vec3(p), prim)[0])


def fit_plane_lsq(points: Iterable[ArrayLike]) -> Plane:
    """Total-least-squares plane: centroid plus smallest-eigenvector normal."""
    pts = as_points(np.asarray(list(points) if not isinstance(points, np.ndarray) else points))
    if len(pts) < 3:
        raise DegenerateInput(f"Plane fit needs at least 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[2] <= 0 or eigvals[1] <= 1e-12 * eigvals[2]:
        raise DegenerateInput("Points are collinear or coincident; no unique plane")
    normal = eigvecs[:, 0]
    return Plane(normal, float(np.dot(normal, centroid)))


def orthonormal_basis(normal: ArrayLike) -> Tuple[Vec3, Vec3]:
    """In-plane axes (e1, e2) such that [e1 e2 n] is right-handed."""
    n = as_vec3(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - np.dot(helper, n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2
