import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import trimesh

from geometry.core import PlanarPrimitive, Provenance
from utils.errors import ManifestParse, UnknownFormat


PRIMITIVES_FORMAT = "crisp-primitives"
SIM_MANIFEST_FORMAT = "crisp-sim-manifest"
EXPORT_FORMATS = ("obj", "sim-manifest")
SCENE_SUFFIXES = (".ply", ".obj")

# Outward-facing triangles over the corner order of PlanarPrimitive.corners().
BOX_TRIANGLES = np.array(
    [
        [0, 1, 3], [0, 3, 2],
        [4, 7, 5], [4, 6, 7],
        [0, 4, 5], [0, 5, 1],
        [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4],
        [1, 5, 7], [1, 7, 3],
    ]
)


def primitive_record(prim: PlanarPrimitive, index: int) -> Dict[str, Any]:
    return {
        "id": index,
        "provenance": prim.provenance.value,
        "group_id": prim.group_id,
        "quaternion_wxyz": [float(v) for v in prim.quaternion().array()],
        "rotation": [[float(v) for v in row] for row in prim.rotation],
        "center": [float(v) for v in prim.center],
        "extents": [float(v) for v in prim.extents],
        "inlier_count": int(prim.inlier_count),
        "fit_residual": float(prim.fit_residual),
    }


def primitive_from_record(record: Dict[str, Any]) -> PlanarPrimitive:
    try:
        return PlanarPrimitive(
            rotation=np.asarray(record["rotation"], dtype=np.float64),
            center=record["center"],
            extents=record["extents"],
            provenance=Provenance(record.get("provenance", Provenance.FITTED.value)),
            inlier_count=int(record.get("inlier_count", 0)),
            fit_residual=float(record.get("fit_residual", 0.0)),
            group_id=record.get("group_id"),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ManifestParse(f"Malformed primitive record {record.get('id', '?')}: {err}") from err


def primitives_document(
    primitives: Sequence[PlanarPrimitive], config: Dict[str, Any], config_hash: str
) -> Dict[str, Any]:
    return {
        "format": PRIMITIVES_FORMAT,
        "version": 1,
        "config": config,
        "config_hash": config_hash,
        "primitives": [primitive_record(prim, i) for i, prim in enumerate(primitives)],
    }


def write_json(path: Path, document: Dict[str, Any]) -> Path:
    """Canonical JSON: sorted keys and fixed indentation, so equal inputs give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_primitives_json(path: str) -> Tuple[List[PlanarPrimitive], Dict[str, Any]]:
    source = Path(path)
    if not source.exists():
        raise ManifestParse(f"Primitive file not found: {path}")
    try:
        document = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ManifestParse(f"Primitive file is not valid JSON: {err}") from err
    if not isinstance(document, dict) or not isinstance(document.get("primitives"), list):
        raise ManifestParse(f"{path} has no primitive list")
    return [primitive_from_record(record) for record in document["primitives"]], document


def box_mesh(primitives: Sequence[PlanarPrimitive]) -> trimesh.Trimesh:
    """All primitives as one closed triangle mesh, eight vertices per box."""
    if not primitives:
        return trimesh.Trimesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64), process=False)
    vertices = np.concatenate([prim.corners() for prim in primitives])
    faces = np.concatenate([BOX_TRIANGLES + 8 * i for i in range(len(primitives))])
    return trimesh.Trimesh(vertices=vertices, faces=faces, process=False)


def obj_text(primitives: Sequence[PlanarPrimitive]) -> str:
    lines = ["# planar primitives as boxes"]
    for i, prim in enumerate(primitives):
        lines.append(f"o primitive_{i:03d}_{prim.provenance.value}")
        lines.extend("v {:.9f} {:.9f} {:.9f}".format(*corner) for corner in prim.corners())
        for tri in BOX_TRIANGLES + 8 * i + 1:
            lines.append("f {} {} {}".format(*tri))
    return "\n".join(lines) + "\n"


def sim_manifest(primitives: Sequence[PlanarPrimitive], config_hash: Optional[str] = None) -> Dict[str, Any]:
    return {
        "format": SIM_MANIFEST_FORMAT,
        "version": 1,
        "config_hash": config_hash,
        "bodies": [
            {
                "name": f"primitive_{i:03d}",
                "type": "box",
                "fixed": True,
                "provenance": prim.provenance.value,
                "position": [float(v) for v in prim.center],
                "quaternion_wxyz": [float(v) for v in prim.quaternion().array()],
                "half_extents": [float(v) for v in prim.half_extents],
            }
            for i, prim in enumerate(primitives)
        ],
    }


def load_scene_mesh(path: str) -> trimesh.Trimesh:
    source = Path(path)
    if source.suffix.lower() not in SCENE_SUFFIXES:
        raise UnknownFormat(f"Ground-truth scene must be one of {', '.join(SCENE_SUFFIXES)}, got {source.name}")
    if not source.exists():
        raise ManifestParse(f"Ground-truth scene not found: {path}")
    mesh = trimesh.load(str(source), force="mesh", process=False)
    if not isinstance(mesh, trimesh.Trimesh) or len(mesh.faces) == 0:
        raise ManifestParse(f"Ground-truth scene has no triangles: {path}")
    return mesh


@dataclass
class PrimitiveExporter:
    out_dir: str

    def _target(self, name: str) -> Path:
        Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        return Path(self.out_dir) / name

    def write_obj(self, primitives: Sequence[PlanarPrimitive], name: str = "primitives.obj") -> Path:
        path = self._target(name)
        path.write_text(obj_text(primitives), encoding="utf-8")
        return path

    def write_sim_manifest(
        self, primitives: Sequence[PlanarPrimitive], config_hash: Optional[str] = None, name: str = "sim_manifest.json"
    ) -> Path:
        return write_json(self._target(name), sim_manifest(primitives, config_hash))

    def export(self, primitives: Sequence[PlanarPrimitive], fmt: str, config_hash: Optional[str] = None) -> List[Path]:
        if fmt == "obj":
            return [self.write_obj(primitives)]
        if fmt == "sim-manifest":
            return [self.write_sim_manifest(primitives, config_hash)]
        raise UnknownFormat(f"Unknown export format {fmt!r}; expected one of {', '.join(EXPORT_FORMATS)}")
