import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from utils.errors import ConfigError


REFERENCE_PIXELS = 256 * 256
OVERLAP_MODES = {"min", "iou"}
SCALE_STATISTICS = {"median", "mean"}
ENERGY_SIGNS = {"penalty", "printed"}


def default_workers() -> int:
    raw = os.getenv("CRISP_WORKERS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as err:
        raise ConfigError(f"CRISP_WORKERS must be an integer, got {raw!r}") from err


@dataclass(frozen=True)
class PipelineConfig:
    # ingest
    recover_scale: bool = True
    scale_statistic: str = "median"
    min_overlap_pixels: int = 100
    spatial_filter: bool = True
    depth_percentile: float = 95.0
    pelvis_radius: float = 2.5

    # segmentation
    normal_clusters: int = 6
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    normal_step: int = 1
    crease_angle_deg: float = 20.0
    depth_jump_ratio: float = 0.1
    normal_outlier_ratio: float = 0.05
    normal_smoothing: int = 1
    normal_merge_deg: float = 15.0
    dbscan_eps: float = 0.15
    dbscan_min_points: int = 20
    min_segment_size: int = 200

    # association
    pair_strides: Tuple[int, ...] = (1, 5)
    rho_min: float = 0.5
    gamma_min: float = math.cos(math.radians(15.0))
    overlap_mode: str = "min"

    # primitive fitting
    ransac_inlier_tol: float = 0.02
    ransac_iters: int = 500
    ransac_min_points: int = 50
    ransac_sample_cap: int = 20000
    fill_min: float = 0.6
    fill_cell: float = 0.05
    split_max_depth: int = 3
    coplanar_merge: bool = True
    coplanar_angle_deg: float = 5.0
    coplanar_offset: float = 0.05
    coplanar_gap: float = 0.15

    # contact completion
    contact_enabled: bool = True
    contact_window: int = 15
    contact_tau: float = 0.5
    contact_nu: float = 0.3

    # evaluation
    penetration_eps: float = 0.01
    chamfer_samples: int = 10000
    energy_sign: str = "penalty"
    episodes: int = 8
    fps: float = 30.0

    seed: int = 0
    workers: int = field(default_factory=default_workers)

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.scale_statistic in SCALE_STATISTICS, f"scale_statistic must be one of {sorted(SCALE_STATISTICS)}"),
            (self.min_overlap_pixels >= 1, "min_overlap_pixels must be >= 1"),
            (0.0 < self.depth_percentile <= 100.0, "depth_percentile must be in (0, 100]"),
            (self.pelvis_radius > 0, "pelvis_radius must be positive"),
            (self.normal_clusters >= 1, "normal_clusters must be >= 1"),
            (self.kmeans_max_iter >= 1, "kmeans_max_iter must be >= 1"),
            (self.kmeans_tol > 0, "kmeans_tol must be positive"),
            (self.normal_step >= 1, "normal_step must be >= 1"),
            (0.0 < self.crease_angle_deg <= 180.0, "crease_angle_deg must be in (0, 180]"),
            (self.depth_jump_ratio > 0, "depth_jump_ratio must be positive"),
            (self.normal_outlier_ratio > 0, "normal_outlier_ratio must be positive"),
            (self.normal_smoothing >= 0, "normal_smoothing must be non-negative"),
            (0.0 <= self.normal_merge_deg < 90.0, "normal_merge_deg must be in [0, 90)"),
            (self.dbscan_eps > 0, "dbscan_eps must be positive"),
            (self.dbscan_min_points >= 1, "dbscan_min_points must be >= 1"),
            (self.min_segment_size >= 1, "min_segment_size must be >= 1"),
            (len(self.pair_strides) > 0 and all(s >= 1 for s in self.pair_strides), "pair_strides must be positive"),
            (0.0 <= self.rho_min <= 1.0, "rho_min must be in [0, 1]"),
            (-1.0 <= self.gamma_min <= 1.0, "gamma_min must be in [-1, 1]"),
            (self.overlap_mode in OVERLAP_MODES, f"overlap_mode must be one of {sorted(OVERLAP_MODES)}"),
            (self.ransac_inlier_tol > 0, "ransac_inlier_tol must be positive"),
            (self.ransac_iters >= 1, "ransac_iters must be >= 1"),
            (self.ransac_min_points >= 3, "ransac_min_points must be >= 3"),
            (self.ransac_sample_cap >= 3, "ransac_sample_cap must be >= 3"),
            (0.0 <= self.fill_min <= 1.0, "fill_min must be in [0, 1]"),
            (self.fill_cell > 0, "fill_cell must be positive"),
            (self.split_max_depth >= 0, "split_max_depth must be >= 0"),
            (0.0 <= self.coplanar_angle_deg < 90.0, "coplanar_angle_deg must be in [0, 90)"),
            (self.coplanar_offset > 0, "coplanar_offset must be positive"),
            (self.coplanar_gap > 0, "coplanar_gap must be positive"),
            (self.contact_window >= 1, "contact_window must be >= 1"),
            (0.0 <= self.contact_tau <= 1.0, "contact_tau must be in [0, 1]"),
            (self.contact_nu >= 0, "contact_nu must be non-negative"),
            (self.penetration_eps >= 0, "penetration_eps must be non-negative"),
            (self.chamfer_samples >= 1, "chamfer_samples must be >= 1"),
            (self.energy_sign in ENERGY_SIGNS, f"energy_sign must be one of {sorted(ENERGY_SIGNS)}"),
            (self.episodes >= 0, "episodes must be non-negative"),
            (self.fps > 0, "fps must be positive"),
            (self.seed >= 0, "seed must be non-negative"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def scaled_segment_sizes(self, height: int, width: int) -> Tuple[int, int]:
        """DBSCAN minPts and the minimum segment size, scaled linearly with pixel count."""
        ratio = (height * width) / REFERENCE_PIXELS
        min_points = max(3, int(round(self.dbscan_min_points * ratio)))
        min_size = max(1, int(round(self.min_segment_size * ratio)))
        return min_points, min_size

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["pair_strides"] = list(self.pair_strides)
        return data

    def provenance_dict(self) -> Dict[str, Any]:
        data = self.to_dict()
        data.pop("workers")
        return data

    def config_hash(self) -> str:
        payload = json.dumps(self.provenance_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        updates = {key: value for key, value in overrides.items() if value is not None}
        return _coerce(self, updates)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        return _coerce(cls(), data)

    @classmethod
    def from_sources(
        cls, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
    ) -> "PipelineConfig":
        """defaults < config file < command-line overrides."""
        config = cls()
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"Config file not found: {config_path}")
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as err:
                raise ConfigError(f"Config file is not valid JSON: {err}") from err
            if not isinstance(data, dict):
                raise ConfigError("Config file must hold a JSON object")
            data = data.get("config", data)
            config = _coerce(config, data)
        if overrides:
            config = config.with_overrides(overrides)
        return config.validate()


def _coerce(base: PipelineConfig, data: Dict[str, Any]) -> PipelineConfig:
    known = {f.name: f for f in fields(PipelineConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
    updates: Dict[str, Any] = {}
    for key, value in data.items():
        current = getattr(base, key)
        try:
            if key == "pair_strides":
                updates[key] = tuple(int(v) for v in value)
            elif isinstance(current, bool):
                if not isinstance(value, bool):
                    raise TypeError(f"expected a boolean, got {value!r}")
                updates[key] = value
            elif isinstance(current, int):
                updates[key] = int(value)
            elif isinstance(current, float):
                updates[key] = float(value)
            else:
                updates[key] = value
        except (TypeError, ValueError) as err:
            raise ConfigError(f"Invalid value for {key}: {err}") from err
    return replace(base, **updates)
