import csv
import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import typer
from dotenv import load_dotenv

from geometry.core import Plane
from ingest.dataset import MotionSequence, load_dataset, parse_motion_text
from pipeline import evaluate_run, fit_dataset, plane_summary
from synth.scenes import SCENARIOS
from synth.writer import write_synthetic_dataset
from utils.config import PipelineConfig
from utils.errors import ConfigError, ConfigMismatch, CrispError, ManifestParse, ShapeMismatch, error_record
from utils.exporters import (
    PrimitiveExporter,
    load_scene_mesh,
    primitives_document,
    read_primitives_json,
    write_json,
)
from utils.run_log import RunLog


app = typer.Typer(add_completion=False, help="Planar primitive reconstruction from point-map videos.")


def ensure_dir(path: str) -> None:
    Path(path).mkdir(parents=True, exist_ok=True)


def fail(err: CrispError, run_log: Optional[RunLog] = None) -> None:
    record = error_record(err)
    if run_log is not None:
        run_log.append(f"Failed: {err}", **record)
        run_log.close()
    typer.echo(json.dumps(record), err=True)
    raise typer.Exit(code=err.exit_code)


def read_motion(path: str) -> MotionSequence:
    """Motion from a dataset directory / manifest, or from a bare motion text file."""
    source = Path(path)
    if source.is_dir() or source.suffix == ".json":
        return load_dataset(path).motion
    if not source.exists():
        raise ManifestParse(f"Motion file not found: {path}")
    return parse_motion_text(source.read_text(encoding="utf-8"))


def read_ground_truth_planes(path: str) -> List[Plane]:
    source = Path(path)
    if not source.exists():
        raise ManifestParse(f"Ground-truth sidecar not found: {path}")
    try:
        sidecar = json.loads(source.read_text(encoding="utf-8"))
        return [
            Plane(record["normal"], record["offset"])
            for record in sidecar["planes"]
            if record.get("visible_frames", 1) > 0 and not record.get("hidden", False)
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise ManifestParse(f"Malformed ground-truth sidecar {path}: {err}") from err


def read_torques(path: str, motion: Optional[MotionSequence]) -> np.ndarray:
    """Raw little-endian float32 joint torques, one (J, 3) block per predicted frame."""
    source = Path(path)
    if not source.exists():
        raise ManifestParse(f"Torque file not found: {path}")
    if motion is None:
        raise ConfigError("--torques needs --pred-motion to size the torque blocks")
    raw = np.fromfile(source, dtype="<f4")
    expected = motion.num_frames * motion.num_joints * 3
    if raw.size != expected:
        raise ShapeMismatch(
            f"Torque file holds {raw.size} values, expected {motion.num_frames}x{motion.num_joints}x3"
        )
    return raw.astype(np.float64).reshape(motion.num_frames, motion.num_joints, 3)


def generate_runtime_report(logs_dir: str, run_stamp: str, timings: List[Dict[str, Any]], counts: Dict[str, Any]) -> str:
    report_path = Path(logs_dir) / f"runtime_{run_stamp}.md"
    lines = ["# Runtime Breakdown", "", f"- Run Time: {time.strftime('%Y-%m-%d %H:%M:%S')}"]
    lines.append(f"- Total: {sum(item['seconds'] for item in timings):.2f}s")
    lines.extend(["", "| Stage | Seconds | Proportion |", "| --- | --- | --- |"])
    for item in timings:
        lines.append(f"| {item['stage']} | {item['seconds']:.2f} | {item['proportion']:.1f}% |")
    lines.extend(["", "## Counts"])
    lines.extend(f"- {key}: {value}" for key, value in counts.items())
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(report_path)


@app.command()
def fit(
    dataset: str = typer.Argument(..., help="Dataset directory or manifest.json"),
    output_dir: str = typer.Option("outputs", "-o", "--output-dir"),
    no_contact: bool = typer.Option(False, "--no-contact", help="Skip contact-guided completion"),
    config: Optional[str] = typer.Option(None, "--config", help="JSON config file"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    workers: Optional[int] = typer.Option(None, "--workers"),
    debug: bool = typer.Option(False, "--debug", help="Dump segment labels and association tables"),
):
    """Fit planar primitives to a dataset."""
    load_dotenv()
    ensure_dir(output_dir)
    run_log = RunLog(logs_dir=str(Path(output_dir) / "logs"))
    run_log.capture_library_logs()
    try:
        overrides: Dict[str, Any] = {"seed": seed, "workers": workers}
        if no_contact:
            overrides["contact_enabled"] = False
        cfg = PipelineConfig.from_sources(config, overrides)
        run_log.append(f"Config hash {cfg.config_hash()}", config=cfg.to_dict())

        run_log.append(f"Loading dataset {dataset}")
        data = load_dataset(dataset)
        run_log.append(f"Loaded {data.num_frames} frames, {len(data.flows)} flow fields")

        debug_dir = str(Path(output_dir) / "debug") if debug else None
        result = fit_dataset(data, cfg, run_log, debug_dir)
    except CrispError as err:
        fail(err, run_log)

    exporter = PrimitiveExporter(output_dir)
    json_path = write_json(
        Path(output_dir) / "primitives.json",
        primitives_document(result.primitives, cfg.provenance_dict(), cfg.config_hash()),
    )
    obj_path = exporter.write_obj(result.primitives)
    metadata = {
        "config_hash": cfg.config_hash(),
        "seeds": {"seed": cfg.seed},
        "workers": cfg.workers,
        "scale": result.scale,
        "counts": result.counts,
        "timings": run_log.timings(),
    }
    write_json(Path(output_dir) / "run_metadata.json", metadata)
    report = generate_runtime_report(str(Path(output_dir) / "logs"), run_log.run_stamp, run_log.timings(), result.counts)
    run_log.append(f"Wrote {len(result.primitives)} primitives to {json_path} and {obj_path}")
    run_log.append(f"Runtime breakdown at {report}")
    run_log.close()


@app.command("eval")
def evaluate(
    primitives: str = typer.Option(..., "--primitives", help="Primitive JSON written by fit"),
    gt_scene: Optional[str] = typer.Option(None, "--gt-scene", help="Ground-truth scene, .ply or .obj"),
    pred_motion: Optional[str] = typer.Option(None, "--pred-motion"),
    gt_motion: Optional[str] = typer.Option(None, "--gt-motion"),
    gt_planes: Optional[str] = typer.Option(None, "--gt-planes", help="Ground-truth sidecar with plane list"),
    torques: Optional[str] = typer.Option(None, "--torques", help="Raw float32 joint torques, frames x joints x 3"),
    output_dir: str = typer.Option("outputs", "-o", "--output-dir"),
    config: Optional[str] = typer.Option(None, "--config"),
    force: bool = typer.Option(False, "--force", help="Evaluate even if the config hashes differ"),
):
    """Score primitives and motion against ground truth."""
    load_dotenv()
    ensure_dir(output_dir)
    run_log = RunLog(logs_dir=str(Path(output_dir) / "logs"))
    run_log.capture_library_logs()
    try:
        prims, document = read_primitives_json(primitives)
        fitted_hash = document.get("config_hash")
        if config:
            cfg = PipelineConfig.from_sources(config)
            if fitted_hash and cfg.config_hash() != fitted_hash:
                if not force:
                    raise ConfigMismatch(
                        f"Eval config {cfg.config_hash()[:12]} differs from fit config {fitted_hash[:12]}; use --force"
                    )
                run_log.append("Config hashes differ; continuing because of --force")
        else:
            cfg = PipelineConfig.from_dict(document.get("config", {})).validate()

        with run_log.stage("evaluate"):
            mesh = load_scene_mesh(gt_scene) if gt_scene else None
            pred = read_motion(pred_motion) if pred_motion else None
            truth = read_motion(gt_motion) if gt_motion else None
            applied = read_torques(torques, pred) if torques else None
            report = evaluate_run(prims, cfg, mesh, pred, truth, applied)
        payload = report.to_dict()
        payload["fit_config_hash"] = fitted_hash
        if gt_planes:
            payload["plane_matching"] = plane_summary(prims, read_ground_truth_planes(gt_planes))
    except CrispError as err:
        fail(err, run_log)

    write_json(Path(output_dir) / "report.json", payload)
    if report.reward_trace:
        with open(Path(output_dir) / "reward_trace.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "reward", "terminated"])
            for t, reward in enumerate(report.reward_trace):
                stopped = report.termination_frame is not None and t >= report.termination_frame
                writer.writerow([t, f"{reward:.9f}", int(stopped)])
    run_log.append(f"Report written to {Path(output_dir) / 'report.json'}", metrics=report.metrics())
    run_log.close()


@app.command()
def synth(
    scenario: str = typer.Option(..., "--scenario", help="walk, sit, stairs or room"),
    output_dir: str = typer.Option(..., "-o", "--output-dir"),
    sigma: float = typer.Option(0.0, "--sigma", help="Depth noise, metres"),
    outliers: float = typer.Option(0.0, "--outliers", help="Fraction of outlier pixels"),
    seed: int = typer.Option(0, "--seed"),
    frames: Optional[int] = typer.Option(None, "--frames"),
    workers: Optional[int] = typer.Option(None, "--workers"),
):
    """Render a synthetic dataset with ground truth."""
    load_dotenv()
    run_log = RunLog(echo=True)
    run_log.capture_library_logs()
    try:
        if scenario not in SCENARIOS:
            raise ConfigError(f"Unknown scenario {scenario!r}; expected one of {', '.join(SCENARIOS)}")
        cfg = PipelineConfig.from_sources(None, {"workers": workers})
        with run_log.stage("synth"):
            manifest = write_synthetic_dataset(
                scenario, output_dir, sigma, outliers, seed, frames,
                cfg.pair_strides, cfg.fps, cfg.contact_window, cfg.workers,
            )
    except CrispError as err:
        fail(err, run_log)
    run_log.append(f"Dataset written to {manifest}")
    run_log.close()


@app.command()
def export(
    primitives: str = typer.Argument(..., help="Primitive JSON written by fit"),
    fmt: str = typer.Option("obj", "--format", help="obj or sim-manifest"),
    output_dir: str = typer.Option("outputs", "-o", "--output-dir"),
):
    """Convert a primitive JSON to OBJ boxes or a simulator manifest."""
    load_dotenv()
    run_log = RunLog(echo=True)
    try:
        prims, document = read_primitives_json(primitives)
        paths = PrimitiveExporter(output_dir).export(prims, fmt, document.get("config_hash"))
    except CrispError as err:
        fail(err, run_log)
    for path in paths:
        run_log.append(f"Exported {len(prims)} primitives to {path}")
    run_log.close()


if __name__ == "__main__":
    app()
