from pathlib import Path

import numpy as np
import pytest

from evaluation.metrics import inlier_recall, match_planes
from geometry.core import Provenance
from ingest.dataset import load_dataset
from main import read_ground_truth_planes
from pipeline import evaluate_run, fit_dataset, plane_summary
from synth.motion import synth_motion_and_contacts
from synth.renderer import render_pointmaps
from synth.scenes import build_scene
from synth.writer import GROUND_TRUTH_NAME, SCENE_MESH_NAME, write_synthetic_dataset
from utils.config import PipelineConfig
from utils.exporters import load_scene_mesh
from utils.run_log import RunLog


pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def stairs_fit(stairs_dir):
    return fit_dataset(load_dataset(stairs_dir), PipelineConfig(workers=1))


class TestStairs:
    def test_every_plane_recovered(self, stairs_dir, stairs_fit):
        truth = read_ground_truth_planes(str(Path(stairs_dir) / GROUND_TRUTH_NAME))
        summary = plane_summary(stairs_fit.primitives, truth)
        assert summary["ground_truth_planes"] == 11
        assert summary["matched"] == 11
        assert summary["max_angle_deg"] < 0.5
        assert summary["max_offset_error"] < 0.005

    def test_primitive_budget(self, stairs_fit):
        assert 11 <= len(stairs_fit.by_provenance(Provenance.FITTED)) <= 22

    def test_scale_is_metric(self, stairs_fit):
        assert stairs_fit.scale == pytest.approx(1.0, abs=0.01)

    def test_counts_recorded(self, stairs_fit):
        counts = stairs_fit.counts
        assert counts["segments"] >= counts["groups"] >= counts["fitted_primitives"] > 0
        assert counts["accepted_edges"] <= counts["edges"]

    def test_same_result_for_any_worker_count(self, stairs_dir, stairs_fit):
        parallel = fit_dataset(load_dataset(stairs_dir), PipelineConfig(workers=3))
        assert len(parallel.primitives) == len(stairs_fit.primitives)
        for a, b in zip(stairs_fit.primitives, parallel.primitives):
            assert np.array_equal(a.center, b.center)
            assert np.array_equal(a.rotation, b.rotation)
            assert np.array_equal(a.extents, b.extents)

    def test_evaluation_against_scene(self, stairs_dir, stairs_fit):
        data = load_dataset(stairs_dir)
        mesh = load_scene_mesh(str(Path(stairs_dir) / SCENE_MESH_NAME))
        report = evaluate_run(stairs_fit.primitives, PipelineConfig(workers=1), mesh, data.motion, data.motion)
        assert report.cd_bi is not None and report.cd_bi < 0.5
        assert report.w_mpjpe100 == pytest.approx(0.0, abs=1e-6)
        assert report.termination_frame is None
        assert 0.0 <= report.non_pene <= 1.0

    def test_stage_timings(self, stairs_dir):
        run_log = RunLog(echo=False)
        fit_dataset(load_dataset(stairs_dir), PipelineConfig(workers=1, contact_enabled=False), run_log)
        stages = [row["stage"] for row in run_log.timings()]
        assert stages == ["scale", "filter", "segment", "associate", "fit"]
        assert sum(row["proportion"] for row in run_log.timings()) == pytest.approx(100.0)

    def test_debug_dump(self, stairs_dir, tmp_path):
        fit_dataset(load_dataset(stairs_dir), PipelineConfig(workers=1), debug_dir=str(tmp_path))
        assert (tmp_path / "segmentation" / "segments.json").exists()
        assert (tmp_path / "association" / "edges.csv").exists()


def test_contacts_complete_the_hidden_seat(sit_dir):
    data = load_dataset(sit_dir)
    mesh = load_scene_mesh(str(Path(sit_dir) / SCENE_MESH_NAME))
    cfg = PipelineConfig(workers=1)
    with_contact = fit_dataset(data, cfg)
    without = fit_dataset(data, PipelineConfig(workers=1, contact_enabled=False))

    seats = with_contact.by_provenance(Provenance.CONTACT_COMPLETED)
    assert seats
    assert any(abs(prim.observed_plane.offset - 0.45) < 0.02 for prim in seats)
    assert not without.by_provenance(Provenance.CONTACT_COMPLETED)
    assert not [
        prim
        for prim in without.primitives
        if abs(prim.observed_plane.normal[2]) > 0.99 and abs(prim.observed_plane.offset - 0.45) < 0.02
    ]

    full = evaluate_run(with_contact.primitives, cfg, mesh)
    ablated = evaluate_run(without.primitives, cfg, mesh)
    assert full.cd_one_gt_to_recon < ablated.cd_one_gt_to_recon


def test_contact_seat_tightens_noisy_reconstruction(tmp_path):
    write_synthetic_dataset("sit", str(tmp_path), sigma=0.005)
    data = load_dataset(str(tmp_path))
    mesh = load_scene_mesh(str(tmp_path / SCENE_MESH_NAME))
    cfg = PipelineConfig(workers=1)
    with_contact = fit_dataset(data, cfg)
    without = fit_dataset(data, PipelineConfig(workers=1, contact_enabled=False))
    assert with_contact.by_provenance(Provenance.CONTACT_COMPLETED)
    for a, b in zip(with_contact.primitives, without.primitives):
        assert np.array_equal(a.center, b.center) and np.array_equal(a.extents, b.extents)

    full = evaluate_run(with_contact.primitives, cfg, mesh)
    ablated = evaluate_run(without.primitives, cfg, mesh)
    assert full.cd_one_recon_to_gt < ablated.cd_one_recon_to_gt
    assert full.cd_one_gt_to_recon < ablated.cd_one_gt_to_recon
    assert full.cd_bi < ablated.cd_bi


def test_cluttered_room(tmp_path):
    write_synthetic_dataset("room", str(tmp_path))
    cfg = PipelineConfig(workers=2, spatial_filter=False, recover_scale=False)
    result = fit_dataset(load_dataset(str(tmp_path)), cfg)
    assert 15 <= len(result.by_provenance(Provenance.FITTED)) <= 60


def test_noisy_stairs_recover_every_plane(tmp_path):
    write_synthetic_dataset("stairs", str(tmp_path), sigma=0.005, outliers=0.2, num_frames=12)
    cfg = PipelineConfig(workers=1)
    result = fit_dataset(load_dataset(str(tmp_path)), cfg)
    truth = read_ground_truth_planes(str(tmp_path / GROUND_TRUTH_NAME))
    fitted = result.by_provenance(Provenance.FITTED)
    matches = match_planes([prim.observed_plane for prim in fitted], truth)
    assert len(truth) == 11
    assert len(matches) == 11
    assert max(m.angle_deg for m in matches) < 2.0
    assert max(m.offset_error for m in matches) < 0.05

    # every stairs plane is visible, so truth index == scene primitive index
    spec = build_scene("stairs", 12, sigma=0.005, outliers=0.2, seed=0)
    rendered = render_pointmaps(spec, synth_motion_and_contacts(spec, "stairs").human_boxes)
    observed = rendered.points.valid & ~rendered.outliers
    for m in matches:
        pixels = observed & (rendered.plane_ids == m.truth)
        points = rendered.points.points[pixels].astype(np.float64) * result.scale
        recall = inlier_recall(points, fitted[m.predicted].observed_plane, cfg.ransac_inlier_tol)
        assert recall >= 0.95, f"plane {m.truth}: recall {recall:.3f}"
