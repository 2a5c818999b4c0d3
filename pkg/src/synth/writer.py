import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from ingest.dataset import Dataset, save_dataset
from synth.motion import synth_motion_and_contacts
from synth.renderer import RenderedFrames, exact_flows, render_pointmaps
from synth.scenes import SceneSpec, build_scene
from utils.exporters import PrimitiveExporter, primitive_record, write_json


logger = logging.getLogger(__name__)

GROUND_TRUTH_NAME = "gt.json"
PLANE_IDS_NAME = "plane_ids.i32"
SCENE_MESH_NAME = "gt_scene.obj"


def ground_truth_sidecar(spec: SceneSpec, rendered: RenderedFrames, scenario: str) -> Dict[str, Any]:
    planes = []
    for index, (prim, plane) in enumerate(zip(spec.primitives, spec.planes())):
        frames = np.flatnonzero((rendered.plane_ids == index).any(axis=(1, 2)))
        planes.append(
            {
                "index": index,
                "label": spec.labels[index],
                "normal": [float(v) for v in plane.normal],
                "offset": float(plane.offset),
                "hidden": index in spec.hidden,
                "visible_frames": int(len(frames)),
            }
        )
    return {
        "scenario": scenario,
        "seed": spec.seed,
        "sigma": spec.sigma,
        "outlier_fraction": spec.outlier_fraction,
        "resolution": [spec.height, spec.width],
        "planes": planes,
        "primitives": [primitive_record(prim, i) for i, prim in enumerate(spec.primitives)],
        "plane_ids": PLANE_IDS_NAME,
        "scene_mesh": SCENE_MESH_NAME,
    }


def write_synthetic_dataset(
    scenario: str,
    out_dir: str,
    sigma: float = 0.0,
    outliers: float = 0.0,
    seed: int = 0,
    num_frames: Optional[int] = None,
    strides: Sequence[int] = (1, 5),
    fps: float = 30.0,
    contact_window: int = 15,
    workers: int = 1,
) -> Path:
    """Render ``scenario`` and write it as an ingest-format dataset.

    Next to the manifest go the ground-truth sidecar, the per-pixel plane ids
    and the ground-truth scene as an OBJ of boxes (hidden primitives included).
    """
    spec = build_scene(scenario, num_frames, sigma=sigma, outliers=outliers, seed=seed)
    scripted = synth_motion_and_contacts(spec, scenario, fps, contact_window)
    rendered = render_pointmaps(spec, scripted.human_boxes, workers)
    flows = exact_flows(spec, rendered, strides, scripted.human_boxes, workers)
    logger.info("Rendered %d frames and %d flow fields for %s", spec.num_frames, len(flows), scenario)

    dataset = Dataset(
        points=rendered.points,
        flows=tuple(flows),
        motion=scripted.motion,
        contacts=scripted.contacts,
        cameras=spec.cameras(),
        human_masks=rendered.human_masks,
        human_depth=rendered.human_depth,
        fps=fps,
    )
    root = Path(out_dir)
    manifest = save_dataset(dataset, str(root), extra={"ground_truth": GROUND_TRUTH_NAME})
    rendered.plane_ids.astype("<i4").tofile(root / PLANE_IDS_NAME)
    write_json(root / GROUND_TRUTH_NAME, ground_truth_sidecar(spec, rendered, scenario))
    PrimitiveExporter(str(root)).write_obj(spec.primitives, SCENE_MESH_NAME)
    return manifest
