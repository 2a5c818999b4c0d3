import json

import numpy as np
import pytest

from conftest import rot_z
from geometry.core import PlanarPrimitive, Provenance
from utils.errors import ManifestParse, UnknownFormat
from utils.exporters import (
    PrimitiveExporter,
    box_mesh,
    load_scene_mesh,
    obj_text,
    primitives_document,
    read_primitives_json,
    sim_manifest,
    write_json,
)


@pytest.fixture
def primitives():
    return [
        PlanarPrimitive(np.eye(3), [0.0, 0.0, -0.025], [4.0, 3.0, 0.05], inlier_count=900, group_id=0),
        PlanarPrimitive(
            rot_z(30.0).matrix(), [1.0, 2.0, 0.42], [0.5, 0.5, 0.06], provenance=Provenance.CONTACT_COMPLETED
        ),
    ]


def test_obj_has_one_box_per_primitive(primitives):
    lines = obj_text(primitives).splitlines()
    assert sum(line.startswith("v ") for line in lines) == 16
    assert sum(line.startswith("f ") for line in lines) == 24
    assert sum(line.startswith("o ") for line in lines) == 2
    faces = np.array([line.split()[1:] for line in lines if line.startswith("f ")], dtype=int)
    assert faces.min() == 1 and faces.max() == 16


def test_box_mesh_is_closed(primitives):
    mesh = box_mesh(primitives)
    assert mesh.is_watertight
    assert mesh.volume == pytest.approx(4.0 * 3.0 * 0.05 + 0.5 * 0.5 * 0.06)


def test_empty_box_mesh():
    assert len(box_mesh([]).faces) == 0


def test_sim_manifest_bodies(primitives):
    manifest = sim_manifest(primitives, "abc123")
    assert manifest["config_hash"] == "abc123"
    seat = manifest["bodies"][1]
    assert seat["type"] == "box" and seat["fixed"] is True
    assert seat["provenance"] == "contact_completed"
    assert seat["half_extents"] == pytest.approx([0.25, 0.25, 0.03])
    assert seat["quaternion_wxyz"] == pytest.approx(list(rot_z(30.0).array()))


def test_primitives_round_trip(tmp_path, primitives):
    path = write_json(tmp_path / "primitives.json", primitives_document(primitives, {"seed": 0}, "abc123"))
    loaded, document = read_primitives_json(str(path))
    assert document["config_hash"] == "abc123"
    assert len(loaded) == 2
    for before, after in zip(primitives, loaded):
        assert np.allclose(before.rotation, after.rotation)
        assert np.allclose(before.center, after.center)
        assert np.allclose(before.extents, after.extents)
        assert before.provenance is after.provenance
    assert loaded[0].inlier_count == 900


def test_canonical_json_is_stable(tmp_path, primitives):
    document = primitives_document(primitives, {"seed": 0}, "abc123")
    first = write_json(tmp_path / "a.json", document).read_bytes()
    second = write_json(tmp_path / "b.json", document).read_bytes()
    assert first == second


class TestBadInput:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestParse):
            read_primitives_json(str(tmp_path / "nope.json"))

    def test_not_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{primitives: ")
        with pytest.raises(ManifestParse):
            read_primitives_json(str(path))

    def test_record_without_center(self, tmp_path):
        path = tmp_path / "partial.json"
        path.write_text(json.dumps({"primitives": [{"id": 0, "rotation": np.eye(3).tolist(), "extents": [1, 1, 1]}]}))
        with pytest.raises(ManifestParse):
            read_primitives_json(str(path))

    def test_scene_suffix(self, tmp_path):
        with pytest.raises(UnknownFormat):
            load_scene_mesh(str(tmp_path / "scene.stl"))

    def test_export_format(self, tmp_path, primitives):
        with pytest.raises(UnknownFormat):
            PrimitiveExporter(str(tmp_path)).export(primitives, "usd")


def test_exported_obj_loads_as_scene(tmp_path, primitives):
    (path,) = PrimitiveExporter(str(tmp_path)).export(primitives, "obj")
    mesh = load_scene_mesh(str(path))
    assert len(mesh.faces) == 24
