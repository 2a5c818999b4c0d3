import math

import numpy as np
import pytest

from conftest import rot_x, rot_y, rot_z
from geometry.core import (
    SE3,
    PlanarPrimitive,
    Plane,
    Provenance,
    UnitQuat,
    cuboid_signed_distance,
    cuboid_signed_distances,
    fit_plane_lsq,
    orthonormal_basis,
    point_plane_distance,
    quat_sub,
)
from geometry.rect import min_area_rect
from utils.errors import DegenerateInput


def unit_cube() -> PlanarPrimitive:
    return PlanarPrimitive(np.eye(3), [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


class TestQuaternions:
    def test_sub_of_self_is_identity(self):
        q = rot_x(37.0) * rot_z(-12.0)
        assert quat_sub(q, q).is_close(UnitQuat.identity())

    def test_sub_on_shared_axis(self):
        assert quat_sub(rot_z(90.0), rot_z(30.0)).is_close(rot_z(60.0))

    def test_sub_recovers_right_factor(self):
        a = rot_x(45.0) * rot_y(30.0)
        r = quat_sub(a, rot_x(45.0))
        assert r.is_close(rot_y(30.0))
        expected = rot_x(45.0).matrix().T @ a.matrix()
        assert np.allclose(r.matrix(), expected, atol=1e-12)

    def test_canonical_hemisphere(self):
        q = UnitQuat(-1.0, 0.0, 0.0, 0.0)
        assert q.w == 1.0
        assert UnitQuat.from_array([-0.5, 0.5, 0.5, 0.5]).w > 0

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            UnitQuat(2.0, 0.0, 0.0, 0.0)

    def test_matrix_round_trip(self):
        q = rot_x(20.0) * rot_y(-70.0) * rot_z(110.0)
        assert UnitQuat.from_matrix(q.matrix()).is_close(q)

    def test_angle(self):
        assert rot_y(90.0).angle() == pytest.approx(math.pi / 2)


class TestSE3:
    def test_inverse_composes_to_identity(self):
        pose = SE3(rot_z(40.0) * rot_x(10.0), [1.0, -2.0, 0.5])
        both = pose * pose.inverse()
        assert both.rotation.is_close(UnitQuat.identity())
        assert np.allclose(both.translation, 0.0, atol=1e-12)

    def test_apply(self):
        pose = SE3(rot_z(90.0), [1.0, 0.0, 0.0])
        assert np.allclose(pose.apply([1.0, 0.0, 0.0]), [1.0, 1.0, 0.0])


class TestPlane:
    def test_point_on_plane(self):
        assert point_plane_distance([3.0, -1.0, 0.0], Plane([0, 0, 1], 0.0)) == pytest.approx(0.0)

    def test_signed_distance_above(self):
        assert point_plane_distance([0.0, 0.0, 2.0], Plane([0, 0, 1], 0.0)) == pytest.approx(2.0)

    def test_origin_below_tilted_plane(self):
        plane = Plane(np.ones(3) / math.sqrt(3.0), math.sqrt(3.0))
        assert point_plane_distance([0.0, 0.0, 0.0], plane) == pytest.approx(-math.sqrt(3.0))

    def test_canonical_sign(self):
        plane = Plane([0.0, 0.0, -2.0], -4.0)
        assert np.allclose(plane.normal, [0, 0, 1])
        assert plane.offset == pytest.approx(2.0)

    def test_canonical_sign_through_origin(self):
        plane = Plane([0.0, -1.0, 0.0], 0.0)
        assert np.allclose(plane.normal, [0, 1, 0])

    def test_zero_normal(self):
        with pytest.raises(DegenerateInput):
            Plane([0.0, 0.0, 0.0], 1.0)

    def test_project(self):
        projected = Plane([0, 0, 1], 1.0).project([[2.0, 3.0, 5.0]])
        assert np.allclose(projected, [[2.0, 3.0, 1.0]])


class TestCuboidDistance:
    def test_center_of_unit_cube(self):
        assert cuboid_signed_distance([0.0, 0.0, 0.0], unit_cube()) == pytest.approx(-0.5)

    def test_one_metre_outside_face(self):
        assert cuboid_signed_distance([0.0, 0.0, 1.5], unit_cube()) == pytest.approx(1.0)

    def test_outside_corner(self):
        assert cuboid_signed_distance([1.5, 1.5, 0.0], unit_cube()) == pytest.approx(math.sqrt(2.0))

    def test_rotated_box(self):
        prim = PlanarPrimitive(rot_z(45.0).matrix(), [1.0, 1.0, 0.0], [2.0, 2.0, 2.0])
        points = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 3.0]])
        assert np.allclose(cuboid_signed_distances(points, prim), [-1.0, 2.0])


class TestFitPlane:
    def test_square_corners(self):
        plane = fit_plane_lsq(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float))
        assert np.allclose(plane.normal, [0, 0, 1])
        assert plane.offset == pytest.approx(0.0, abs=1e-12)

    def test_offset(self):
        pts = np.array([[0, 0, 0.3], [1, 0, 0.3], [0, 2, 0.3], [1, 1, 0.3]], dtype=float)
        assert fit_plane_lsq(pts).offset == pytest.approx(0.3)

    def test_noisy_tilted(self, rng):
        normal = np.ones(3) / math.sqrt(3.0)
        e1, e2 = orthonormal_basis(normal)
        coords = rng.uniform(-1.0, 1.0, size=(200, 2))
        pts = normal / math.sqrt(3.0) + coords[:, :1] * e1 + coords[:, 1:] * e2
        pts += rng.normal(0.0, 0.001, size=pts.shape)
        plane = fit_plane_lsq(pts)
        assert math.degrees(plane.angle_to(Plane(normal, 1.0 / math.sqrt(3.0)))) < 0.2

    def test_collinear(self):
        with pytest.raises(DegenerateInput):
            fit_plane_lsq(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]], dtype=float))

    def test_too_few(self):
        with pytest.raises(DegenerateInput):
            fit_plane_lsq(np.zeros((2, 3)))


class TestPrimitive:
    def test_rejects_left_handed(self):
        with pytest.raises(ValueError):
            PlanarPrimitive(np.diag([1.0, 1.0, -1.0]), [0, 0, 0], [1, 1, 1])

    def test_contact_primitive_thickness(self):
        with pytest.raises(ValueError):
            PlanarPrimitive(np.eye(3), [0, 0, 0], [1, 1, 0.01], provenance=Provenance.CONTACT_COMPLETED)

    def test_observed_face(self):
        prim = PlanarPrimitive(np.eye(3), [0, 0, 1.025], [3.0, 2.0, 0.05])
        plane = prim.observed_plane
        assert np.allclose(plane.normal, [0, 0, 1])
        assert plane.offset == pytest.approx(1.0)

    def test_corners_and_area(self):
        prim = unit_cube()
        assert prim.corners().shape == (8, 3)
        assert np.allclose(np.abs(prim.corners()), 0.5)
        assert prim.surface_area() == pytest.approx(6.0)

    def test_basis_is_right_handed(self):
        for normal in ([0, 0, 1], [1, 0, 0], [0.3, -0.4, 0.866]):
            n = np.asarray(normal, dtype=float) / np.linalg.norm(normal)
            e1, e2 = orthonormal_basis(n)
            assert np.linalg.det(np.column_stack([e1, e2, n])) == pytest.approx(1.0)


class TestMinAreaRect:
    def test_unit_square(self):
        rect = min_area_rect([[0, 0], [1, 0], [1, 1], [0, 1]])
        assert rect.area == pytest.approx(1.0)
        assert rect.angle % (math.pi / 2) == pytest.approx(0.0, abs=1e-12)

    def test_rotated_square(self):
        theta = math.radians(30.0)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float) @ rot.T
        rect = min_area_rect(corners)
        assert rect.area == pytest.approx(1.0, abs=1e-9)
        assert math.degrees(rect.angle) % 90.0 == pytest.approx(30.0, abs=1e-6)

    def test_longer_side_first(self):
        rect = min_area_rect([[0, 0], [3, 0], [3, 1], [0, 1]])
        assert rect.half_extents[0] == pytest.approx(1.5)
        assert rect.half_extents[1] == pytest.approx(0.5)
        assert np.allclose(rect.center, [1.5, 0.5])

    def test_matches_rotation_scan(self):
        scan = np.radians(np.arange(0.0, 90.0, 0.05))[:, None]
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(20, 201))
            if seed % 2:
                pts = rng.normal(size=(n, 2)) * [1.0, rng.uniform(0.4, 1.0)]
            else:
                pts = rng.uniform(-1.0, 1.0, size=(n, 2))
            rect = min_area_rect(pts)
            u = np.cos(scan) * pts[:, 0] + np.sin(scan) * pts[:, 1]
            v = -np.sin(scan) * pts[:, 0] + np.cos(scan) * pts[:, 1]
            best = float(np.min(np.ptp(u, axis=1) * np.ptp(v, axis=1)))
            assert rect.area <= best * (1 + 1e-9), seed
            assert rect.area >= best / 1.005, seed

    def test_collinear(self):
        with pytest.raises(DegenerateInput):
            min_area_rect([[0, 0], [1, 1], [2, 2]])
