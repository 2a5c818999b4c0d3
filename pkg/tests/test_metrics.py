import math

import numpy as np
import pytest
import trimesh
from scipy.spatial.distance import cdist
from trimesh.triangles import closest_point

from conftest import rot_x, rot_z
from geometry.core import PlanarPrimitive, Plane, cuboid_signed_distances
from evaluation.metrics import (
    EvaluationReport,
    chamfer,
    inlier_recall,
    match_planes,
    mesh_surface_distances,
    non_penetration,
    one_way_chamfer,
    primitive_surface_distances,
    rigid_align,
    sample_primitive_surface,
    scene_chamfer,
    segment_bounds,
    trajectory_metrics,
    world_mpjpe,
)
from utils.errors import EmptySet, LengthMismatch
from utils.exporters import box_mesh


def ground(size: float = 10.0) -> PlanarPrimitive:
    """Slab whose top face is the plane z = 0."""
    return PlanarPrimitive(np.eye(3), [0.0, 0.0, -0.025], [size, size, 0.05])


def brute_force_one_way(a: np.ndarray, b: np.ndarray) -> float:
    return float(cdist(a, b).min(axis=1).mean())


class TestChamfer:
    def test_identical(self, rng):
        pts = rng.normal(size=(50, 3))
        assert chamfer(pts, pts) == (0.0, 0.0, 0.0)

    def test_hand_computed(self):
        forward, backward, bi = chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        assert forward == pytest.approx(1.0)
        assert backward == pytest.approx(2.0)
        assert bi == pytest.approx(1.5)

    def test_subset_is_incomplete_not_inaccurate(self, rng):
        gt = rng.normal(size=(200, 3))
        forward, backward, _ = chamfer(gt[:100], gt)
        assert forward == 0.0
        assert backward > 0.0

    def test_symmetric(self, rng):
        a, b = rng.normal(size=(300, 3)), rng.normal(size=(200, 3)) + 0.5
        assert chamfer(a, b)[2] == pytest.approx(chamfer(b, a)[2], abs=1e-12)

    def test_matches_brute_force(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = rng.uniform(size=(int(rng.integers(1, 2001)), 3))
            b = rng.normal(size=(int(rng.integers(1, 2001)), 3))
            assert one_way_chamfer(a, b) == pytest.approx(brute_force_one_way(a, b), abs=1e-12), seed
            assert one_way_chamfer(b, a) == pytest.approx(brute_force_one_way(b, a), abs=1e-12), seed

    def test_empty(self):
        with pytest.raises(EmptySet):
            chamfer(np.zeros((0, 3)), np.zeros((4, 3)))

    def test_primitive_samples_lie_on_planar_faces(self):
        prim = PlanarPrimitive(rot_z(30.0).matrix(), [1.0, 2.0, 0.5], [2.0, 1.0, 0.05])
        samples = sample_primitive_surface([prim], density=500.0, seed=1)
        local = (samples - prim.center) @ prim.rotation
        assert samples.shape == (2000, 3)
        assert np.allclose(np.abs(local[:, 2]), prim.half_extents[2])
        assert np.all(np.abs(local[:, :2]) <= prim.half_extents[:2] + 1e-12)
        assert np.array_equal(samples, sample_primitive_surface([prim], density=500.0, seed=1))

    def test_appending_a_primitive_keeps_earlier_samples(self):
        first = ground(2.0)
        second = PlanarPrimitive(np.eye(3), [0.0, 0.0, 0.5], [0.4, 0.4, 0.05])
        alone = sample_primitive_surface([first], density=50.0, seed=3)
        both = sample_primitive_surface([first, second], density=50.0, seed=3)
        assert np.array_equal(both[: len(alone)], alone)
        assert len(both) == len(alone) + 2 * 8


class TestSurfaceDistances:
    def test_box_mesh_matches_cuboid_distance(self, rng):
        prim = PlanarPrimitive(rot_x(20.0).matrix() @ rot_z(35.0).matrix(), [0.3, -0.2, 0.1], [2.0, 1.0, 0.5])
        pts = rng.uniform(-2.0, 2.0, size=(500, 3))
        exact = np.abs(cuboid_signed_distances(pts, prim))
        assert np.allclose(mesh_surface_distances(pts, box_mesh([prim])), exact, atol=1e-9)
        assert np.allclose(primitive_surface_distances(pts, [prim]), exact)

    def test_fine_mesh_matches_brute_force(self, rng):
        sphere = trimesh.creation.icosphere(subdivisions=3)
        pts = rng.normal(size=(200, 3)) * 0.8
        tris = np.asarray(sphere.triangles)
        pairs = closest_point(np.tile(tris, (len(pts), 1, 1)), np.repeat(pts, len(tris), axis=0))
        brute = np.linalg.norm(pairs - np.repeat(pts, len(tris), axis=0), axis=1).reshape(len(pts), -1).min(axis=1)
        assert np.allclose(mesh_surface_distances(pts, sphere, chunk=64), brute, atol=1e-12)

    def test_empty_inputs(self):
        with pytest.raises(EmptySet):
            primitive_surface_distances(np.zeros((3, 3)), [])
        with pytest.raises(EmptySet):
            mesh_surface_distances(np.zeros((0, 3)), box_mesh([ground()]))


class TestSceneChamfer:
    def test_exact_reconstruction_scores_zero(self):
        prims = [ground(4.0), PlanarPrimitive(rot_z(25.0).matrix(), [0.5, 0.5, 0.6], [0.5, 0.4, 0.05])]
        forward, backward, bi = scene_chamfer(prims, box_mesh(prims), samples=3000, seed=2)
        assert forward == pytest.approx(0.0, abs=1e-9)
        assert backward == pytest.approx(0.0, abs=1e-9)
        assert bi == pytest.approx(0.0, abs=1e-9)

    def test_supported_primitive_lowers_recon_to_gt(self):
        mesh = box_mesh([ground(4.0)])
        lifted = PlanarPrimitive(np.eye(3), [0.0, 0.0, -0.015], [2.0, 2.0, 0.05])
        on_surface = PlanarPrimitive(np.eye(3), [0.5, 0.5, -0.025], [1.0, 1.0, 0.05])
        before = scene_chamfer([lifted], mesh, samples=2000)
        after = scene_chamfer([lifted, on_surface], mesh, samples=2000)
        assert before[0] == pytest.approx(0.01, abs=1e-9)
        assert after[0] < before[0]
        assert after[1] <= before[1]

    def test_missing_primitives(self):
        with pytest.raises(EmptySet):
            scene_chamfer([], box_mesh([ground()]))


class TestNonPenetration:
    def test_all_above_ground(self, rng):
        body = rng.uniform(0.1, 1.8, size=(10, 24, 3))
        assert non_penetration(body, [ground()]) == 1.0

    def test_half_inside_box(self):
        box = PlanarPrimitive(np.eye(3), [0.0, 0.0, 0.5], [1.0, 1.0, 1.0])
        inside = np.tile([0.0, 0.0, 0.9], (6, 1))  # 0.1 m below the top face
        outside = np.tile([0.0, 0.0, 1.5], (6, 1))
        assert non_penetration(np.concatenate([inside, outside]), [box]) == pytest.approx(0.5)

    def test_tolerance(self):
        grazing = np.array([[0.0, 0.0, -0.005], [0.0, 0.0, -0.02]])
        assert non_penetration(grazing, [ground()], eps=0.01) == pytest.approx(0.5)

    def test_no_primitives(self):
        assert non_penetration(np.zeros((3, 3)), []) == 1.0

    def test_empty_body(self):
        with pytest.raises(EmptySet):
            non_penetration(np.zeros((0, 3)), [ground()])

    def test_growing_box_never_raises_score(self, rng):
        body = rng.uniform(-1.0, 1.0, size=(500, 3))
        scores = [
            non_penetration(body, [PlanarPrimitive(np.eye(3), [0.0, 0.0, 0.0], [s, s, s])])
            for s in (0.2, 0.5, 1.0, 1.5, 2.0)
        ]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


def walking_joints(rng, num_frames: int = 100, num_joints: int = 5) -> np.ndarray:
    body = rng.normal(scale=0.3, size=(num_joints, 3))
    path = np.column_stack([np.linspace(0.0, 3.0, num_frames), np.zeros(num_frames), np.full(num_frames, 0.9)])
    return path[:, None, :] + body[None]


class TestWorldMpjpe:
    def test_identical(self, rng):
        joints = walking_joints(rng)
        assert world_mpjpe(joints, joints) == pytest.approx(0.0, abs=1e-9)
        assert world_mpjpe(joints, joints, "full") == pytest.approx(0.0, abs=1e-9)

    def test_rigid_offset_is_removed(self, rng):
        gt = walking_joints(rng)
        rot = (rot_z(35.0) * rot_x(10.0)).matrix()
        pred = gt @ rot.T + [4.0, -2.0, 1.0]
        assert world_mpjpe(pred, gt, "first_two") == pytest.approx(0.0, abs=1e-6)
        assert world_mpjpe(pred, gt, "full") == pytest.approx(0.0, abs=1e-6)

    def test_drift_after_alignment_frames(self, rng):
        gt = walking_joints(rng)
        pred = gt.copy()
        pred[2:, :, 2] += 0.05
        assert world_mpjpe(pred, gt, "first_two") == pytest.approx(50.0, rel=1e-6)
        assert world_mpjpe(pred, gt, "full") < world_mpjpe(pred, gt, "first_two")

    def test_two_frame_segment_scores_alignment_frames(self, rng):
        gt = walking_joints(rng, num_frames=2)
        assert world_mpjpe(gt + [0.0, 0.0, 1.0], gt) == pytest.approx(0.0, abs=1e-6)

    def test_length_mismatch(self, rng):
        with pytest.raises(LengthMismatch):
            world_mpjpe(walking_joints(rng, 100), walking_joints(rng, 90))

    def test_segments(self):
        assert segment_bounds(250) == [(0, 100), (100, 200), (200, 250)]
        assert segment_bounds(205) == [(0, 100), (100, 200)]
        assert segment_bounds(7) == [(0, 7)]

    def test_rigid_align_recovers_rotation(self, rng):
        src = rng.normal(size=(20, 3))
        rot = rot_z(-70.0).matrix()
        found, trans = rigid_align(src, src @ rot.T + 1.0)
        assert np.allclose(found, rot)
        assert np.allclose(trans, 1.0)


class TestTrajectory:
    def test_identical(self, rng):
        joints = walking_joints(rng)
        rte, _, accel = trajectory_metrics(joints, joints)
        assert rte == pytest.approx(0.0, abs=1e-9)
        assert accel == pytest.approx(0.0, abs=1e-9)

    def test_stationary_has_no_jitter(self, rng):
        still = np.repeat(rng.normal(size=(1, 4, 3)), 30, axis=0)
        assert trajectory_metrics(still, still)[1] == pytest.approx(0.0)

    def test_alternating_noise(self, rng):
        gt = np.repeat(rng.normal(size=(1, 4, 3)), 30, axis=0)
        pred = gt.copy()
        pred[:, :, 0] += 0.001 * (-1.0) ** np.arange(30)[:, None]
        _, jitter, accel = trajectory_metrics(pred, gt, fps=30.0)
        assert accel == pytest.approx(4.0)
        assert jitter == pytest.approx(0.008 * 30.0**3 / 10.0)

    def test_rte_is_relative_to_path(self, rng):
        gt = walking_joints(rng)
        pred = gt.copy()
        pred[-1, :, 1] += 0.3
        assert trajectory_metrics(pred, gt)[0] == pytest.approx(10.0)

    def test_short_sequence(self, rng):
        joints = walking_joints(rng, num_frames=2)
        rte, jitter, accel = trajectory_metrics(joints, joints)
        assert jitter is None and accel is None
        assert rte == pytest.approx(0.0, abs=1e-9)


class TestPlaneMatching:
    def test_hungarian(self):
        truth = [Plane([0, 0, 1], 0.0), Plane([1, 0, 0], 2.0), Plane([0, 1, 0], 1.0)]
        predicted = [Plane([0, 1, 0.001], 1.01), Plane([0, 0, 1], 0.002), Plane([1, 0, 0], 2.0)]
        matches = {m.predicted: m for m in match_planes(predicted, truth)}
        assert matches[0].truth == 2 and matches[1].truth == 0 and matches[2].truth == 1
        assert matches[0].offset_error == pytest.approx(1.01 / math.sqrt(1 + 1e-6) - 1.0, abs=1e-9)
        assert matches[0].angle_deg == pytest.approx(math.degrees(math.atan(0.001)), rel=1e-6)

    def test_empty(self):
        assert match_planes([], [Plane([0, 0, 1], 0.0)]) == []

    def test_inlier_recall(self):
        points = np.column_stack([np.zeros(4), np.zeros(4), [0.0, 0.01, -0.02, 0.05]])
        assert inlier_recall(points, Plane([0, 0, 1], 0.0), tol=0.02) == 0.75
        assert inlier_recall(points, Plane([0, 0, 1], 0.05), tol=0.02) == 0.25
        with pytest.raises(EmptySet):
            inlier_recall(np.zeros((0, 3)), Plane([0, 0, 1], 0.0), tol=0.02)


def test_report_dict():
    report = EvaluationReport(cd_bi=0.1, reward_trace=[1.0, 3.0], config_hash="abc")
    data = report.to_dict()
    assert data["mean_reward"] == 2.0
    assert "reward_trace" not in data
    assert data["units"]["w_mpjpe100"] == "mm"
    assert report.metrics()["cd_bi"] == 0.1
    assert report.metrics()["rte"] is None
