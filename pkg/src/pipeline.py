import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import trimesh
from numpy.typing import ArrayLike

from evaluation.metrics import (
    EvaluationReport,
    match_planes,
    non_penetration,
    scene_chamfer,
    trajectory_metrics,
    world_mpjpe,
)
from evaluation.tracking import RewardWeights, reward_trace, rollout_episodes, termination_flags
from geometry.core import PlanarPrimitive, Plane, Provenance
from ingest.dataset import Dataset, MotionSequence
from ingest.filters import apply_metric_scale, filter_points, mask_human_pixels, recover_metric_scale
from stages.association import AssociationStage, SegmentGraph, write_association_debug
from stages.contact import ContactCompletionStage, ContactEvent
from stages.primitive_fit import PrimitiveFitStage
from stages.segmentation import SegmentationStage, write_segmentation_debug
from utils.config import PipelineConfig
from utils.errors import InsufficientOverlap
from utils.run_log import RunLog


logger = logging.getLogger(__name__)


@dataclass
class FitResult:
    primitives: List[PlanarPrimitive]
    scale: float
    counts: Dict[str, Any] = field(default_factory=dict)
    graph: Optional[SegmentGraph] = None
    events: List[ContactEvent] = field(default_factory=list)

    def by_provenance(self, provenance: Provenance) -> List[PlanarPrimitive]:
        return [prim for prim in self.primitives if prim.provenance is provenance]


def fit_dataset(
    dataset: Dataset,
    config: PipelineConfig,
    run_log: Optional[RunLog] = None,
    debug_dir: Optional[str] = None,
) -> FitResult:
    """Run scale recovery, filtering, segmentation, association, fitting and contact completion."""
    run_log = run_log or RunLog(echo=False)
    cfg = config
    points, cams = dataset.points, dataset.cameras
    counts: Dict[str, Any] = {}

    scale = 1.0
    if cfg.recover_scale:
        with run_log.stage("scale") as stats:
            if dataset.human_masks is None:
                raise InsufficientOverlap("Metric scale recovery needs human masks; the dataset has none")
            scale = recover_metric_scale(
                points, dataset.motion, dataset.human_masks, cams, dataset.human_depth,
                cfg.scale_statistic, cfg.min_overlap_pixels,
            )
            points, cams = apply_metric_scale(points, cams, scale)
            stats["scale"] = scale

    with run_log.stage("filter") as stats:
        before = int(points.valid.sum())
        if dataset.human_masks is not None:
            points = mask_human_pixels(points, dataset.human_masks)
        if cfg.spatial_filter:
            points = filter_points(points, dataset.motion, cams, cfg.depth_percentile, cfg.pelvis_radius, cfg.workers)
        stats["kept_points"] = int(points.valid.sum())
        stats["removed_points"] = before - stats["kept_points"]

    stages = {
        "segment": SegmentationStage(cfg),
        "associate": AssociationStage(cfg),
        "fit": PrimitiveFitStage(cfg),
    }
    with run_log.stage("segment") as stats:
        _, segments_by_frame = stages["segment"].execute(points, cams)
        stats.update(stages["segment"].counts())
    with run_log.stage("associate") as stats:
        graph = stages["associate"].execute(segments_by_frame, dataset.flows)
        stats.update(stages["associate"].counts())
    with run_log.stage("fit") as stats:
        primitives = stages["fit"].execute(graph, points, cams)
        stats.update(stages["fit"].counts())

    counts["segments"] = stages["segment"].counts()["segments"]
    for key in ("edges", "accepted_edges", "groups"):
        counts[key] = stages["associate"].counts()[key]
    counts["fitted_primitives"] = len(primitives)

    events: List[ContactEvent] = []
    completed: List[PlanarPrimitive] = []
    if cfg.contact_enabled:
        contact = ContactCompletionStage(cfg)
        with run_log.stage("contact") as stats:
            events, completed = contact.execute(dataset.contacts)
            stats.update(contact.counts())
    counts["contact_events"] = len(events)
    counts["contact_primitives"] = len(completed)

    if debug_dir:
        write_segmentation_debug(str(Path(debug_dir) / "segmentation"), segments_by_frame, points.height, points.width)
        write_association_debug(str(Path(debug_dir) / "association"), graph, cfg.rho_min, cfg.gamma_min)

    return FitResult(primitives + completed, scale, counts, graph, events)


def evaluate_run(
    primitives: Sequence[PlanarPrimitive],
    config: PipelineConfig,
    gt_mesh: Optional[trimesh.Trimesh] = None,
    pred_motion: Optional[MotionSequence] = None,
    gt_motion: Optional[MotionSequence] = None,
    torques: Optional[ArrayLike] = None,
    weights: RewardWeights = RewardWeights(),
) -> EvaluationReport:
    """Every metric the given inputs allow; the rest stay None.

    ``torques`` (T, J, 3) enter the reward energy term with the configured sign.
    """
    report = EvaluationReport(config_hash=config.config_hash())

    if gt_mesh is not None:
        report.cd_one_recon_to_gt, report.cd_one_gt_to_recon, report.cd_bi = scene_chamfer(
            primitives, gt_mesh, config.chamfer_samples, config.seed
        )

    if pred_motion is not None:
        report.non_pene = non_penetration(pred_motion.joint_positions, primitives, config.penetration_eps)

    if pred_motion is not None and gt_motion is not None:
        report.w_mpjpe100 = world_mpjpe(pred_motion, gt_motion, "first_two")
        report.wa_mpjpe100 = world_mpjpe(pred_motion, gt_motion, "full")
        report.rte, report.jitter, report.accel = trajectory_metrics(pred_motion, gt_motion, config.fps)
        report.reward_trace, report.termination_frame = reward_trace(
            pred_motion, gt_motion, weights, torques, config.energy_sign
        )
        if config.episodes:
            rng = np.random.default_rng(config.seed)
            failed = termination_flags(pred_motion, gt_motion)
            played = rollout_episodes(report.reward_trace, failed, config.episodes, rng)
            report.mean_episode_length = float(np.mean([e.length for e in played]))
            report.mean_episode_return = float(np.mean([e.total_reward for e in played]))
    return report


def plane_summary(primitives: Sequence[PlanarPrimitive], truth: Sequence[Plane]) -> Dict[str, Any]:
    """Hungarian match of fitted observed planes against ground-truth planes."""
    matches = match_planes([prim.observed_plane for prim in primitives], truth)
    return {
        "ground_truth_planes": len(truth),
        "matched": len(matches),
        "max_angle_deg": max((m.angle_deg for m in matches), default=None),
        "max_offset_error": max((m.offset_error for m in matches), default=None),
        "matches": [
            {"predicted": m.predicted, "truth": m.truth, "angle_deg": m.angle_deg, "offset_error": m.offset_error}
            for m in matches
        ],
    }
