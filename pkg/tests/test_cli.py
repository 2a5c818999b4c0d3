import csv
import json

import numpy as np
import pytest
from typer.testing import CliRunner

from geometry.core import PlanarPrimitive
from conftest import still_motion
from main import app, read_torques
from utils.errors import ShapeMismatch
from utils.exporters import primitives_document, write_json


runner = CliRunner()


@pytest.fixture(autouse=True)
def no_env_overrides(monkeypatch):
    monkeypatch.delenv("CRISP_LOG_DIR", raising=False)
    monkeypatch.delenv("CRISP_WORKERS", raising=False)


@pytest.fixture
def primitives_file(tmp_path):
    prim = PlanarPrimitive(np.eye(3), [0.0, 0.0, -0.025], [4.0, 4.0, 0.05])
    return write_json(tmp_path / "primitives.json", primitives_document([prim], {"seed": 0}, "abc123"))


@pytest.mark.slow
def test_synth_fit_export_eval(tmp_path):
    data, fitted, reports = tmp_path / "data", tmp_path / "fit", tmp_path / "eval"

    result = runner.invoke(app, ["synth", "--scenario", "stairs", "-o", str(data), "--frames", "8"])
    assert result.exit_code == 0, result.output
    assert (data / "manifest.json").exists()

    result = runner.invoke(app, ["fit", str(data), "-o", str(fitted), "--workers", "2"])
    assert result.exit_code == 0, result.output
    metadata = json.loads((fitted / "run_metadata.json").read_text())
    assert metadata["workers"] == 2
    assert metadata["counts"]["fitted_primitives"] > 0
    assert [row["stage"] for row in metadata["timings"]][:2] == ["scale", "filter"]
    assert (fitted / "primitives.obj").exists()
    assert list((fitted / "logs").glob("run_*.jsonl"))
    assert list((fitted / "logs").glob("runtime_*.md"))

    result = runner.invoke(app, ["export", str(fitted / "primitives.json"), "--format", "sim-manifest", "-o", str(fitted)])
    assert result.exit_code == 0, result.output
    manifest = json.loads((fitted / "sim_manifest.json").read_text())
    assert len(manifest["bodies"]) == metadata["counts"]["fitted_primitives"] + metadata["counts"]["contact_primitives"]
    assert manifest["config_hash"] == metadata["config_hash"]

    result = runner.invoke(
        app,
        [
            "eval",
            "--primitives", str(fitted / "primitives.json"),
            "--gt-scene", str(data / "gt_scene.obj"),
            "--pred-motion", str(data),
            "--gt-motion", str(data),
            "--gt-planes", str(data / "gt.json"),
            "-o", str(reports),
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((reports / "report.json").read_text())
    assert report["cd_bi"] is not None
    assert report["w_mpjpe100"] == pytest.approx(0.0, abs=1e-6)
    assert report["fit_config_hash"] == metadata["config_hash"]
    assert report["plane_matching"]["ground_truth_planes"] > 0
    with open(reports / "reward_trace.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 8
    assert all(row["terminated"] == "0" for row in rows)


def test_missing_dataset_exits_with_input_code(tmp_path):
    result = runner.invoke(app, ["fit", str(tmp_path / "absent"), "-o", str(tmp_path / "out")])
    assert result.exit_code == 2


def test_unknown_scenario(tmp_path):
    result = runner.invoke(app, ["synth", "--scenario", "beach", "-o", str(tmp_path)])
    assert result.exit_code == 2


def test_unknown_export_format(tmp_path, primitives_file):
    result = runner.invoke(app, ["export", str(primitives_file), "--format", "usd", "-o", str(tmp_path)])
    assert result.exit_code == 2


def test_export_obj(tmp_path, primitives_file):
    result = runner.invoke(app, ["export", str(primitives_file), "-o", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    text = (tmp_path / "out" / "primitives.obj").read_text()
    assert text.count("\nv ") == 8


class TestEvalConfig:
    def test_hash_mismatch_is_refused(self, tmp_path, primitives_file):
        config = tmp_path / "other.json"
        config.write_text(json.dumps({"seed": 7}))
        result = runner.invoke(
            app, ["eval", "--primitives", str(primitives_file), "--config", str(config), "-o", str(tmp_path / "r")]
        )
        assert result.exit_code == 2
        assert not (tmp_path / "r" / "report.json").exists()

    def test_force_overrides_mismatch(self, tmp_path, primitives_file):
        config = tmp_path / "other.json"
        config.write_text(json.dumps({"seed": 7}))
        result = runner.invoke(
            app,
            ["eval", "--primitives", str(primitives_file), "--config", str(config), "--force", "-o", str(tmp_path / "r")],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "r" / "report.json").read_text())
        assert report["fit_config_hash"] == "abc123"
        assert report["cd_bi"] is None


def test_torque_file_must_match_motion(tmp_path):
    motion = still_motion(4)
    path = tmp_path / "torques.f32"
    np.arange(4 * 3 * 3, dtype="<f4").tofile(path)
    torques = read_torques(str(path), motion)
    assert torques.shape == (4, 3, 3)
    assert torques[1, 0, 0] == 9.0

    np.zeros(5, dtype="<f4").tofile(path)
    with pytest.raises(ShapeMismatch):
        read_torques(str(path), motion)
