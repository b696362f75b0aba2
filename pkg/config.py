"""
Run configuration.

Every tunable of the matcher lives in one of the dataclasses below. A run is
described by a YAML file whose top-level keys mirror `RunConfig`'s fields;
anything left out takes the default written here. `RunConfig.snapshot()`
gives the plain-dict form that is embedded in every output artifact.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from errors import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.3.0"


def _require(condition, key, message):
    if not condition:
        raise ConfigError(f"{key}: {message}")


@dataclass
class FeatureConfig:
    # Sobel magnitude on 0-255 RGB below which a colour gradient is "missing"
    magnitude_threshold: float = 40.0
    # HSV saturation below which hue is "missing"
    saturation_floor: float = 0.2
    # Sobel magnitude of the depth map (mm) below which a normal is "missing"
    normal_threshold: float = 2.0

    def __post_init__(self):
        _require(self.magnitude_threshold >= 0, "features.magnitude_threshold", "must be >= 0")
        _require(0 <= self.saturation_floor <= 1, "features.saturation_floor", "must lie in [0, 1]")
        _require(self.normal_threshold >= 0, "features.normal_threshold", "must be >= 0")


@dataclass
class PoseGridConfig:
    yaw_steps: int = 8
    yaw_range: tuple = (-30.0, 30.0)
    pitch_steps: int = 5
    pitch_range: tuple = (-25.0, 25.0)
    rolls: tuple = (0.0, 90.0, 180.0, 270.0)
    scales: tuple = (0.9, 1.0)

    def __post_init__(self):
        self.yaw_range = tuple(float(v) for v in self.yaw_range)
        self.pitch_range = tuple(float(v) for v in self.pitch_range)
        self.rolls = tuple(float(v) for v in self.rolls)
        self.scales = tuple(float(v) for v in self.scales)
        _require(self.yaw_steps >= 1, "pose_grid.yaw_steps", "must be >= 1")
        _require(self.pitch_steps >= 1, "pose_grid.pitch_steps", "must be >= 1")
        _require(len(self.yaw_range) == 2, "pose_grid.yaw_range", "needs [low, high]")
        _require(len(self.pitch_range) == 2, "pose_grid.pitch_range", "needs [low, high]")
        _require(len(self.rolls) >= 1, "pose_grid.rolls", "needs at least one roll")
        _require(len(self.scales) >= 1, "pose_grid.scales", "needs at least one scale")

    @property
    def size(self):
        return self.yaw_steps * self.pitch_steps * len(self.rolls) * len(self.scales)


@dataclass
class SceneConfig:
    name: str = "scene"
    size: tuple = (64, 64)
    # explicit placements: [{object_id, pose_index, x, y}]; empty means "use random_objects"
    placements: list = field(default_factory=list)
    random_objects: int = 0
    clutter_density: float = 0.0
    noise_rate: float = 0.0
    occlusion_fraction: float = 0.0
    background_depth: float = 900.0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        key = f"scenes[{self.name}]"
        _require(len(self.size) == 2 and min(self.size) > 0, f"{key}.size", "needs [width, height] > 0")
        _require(self.random_objects >= 0, f"{key}.random_objects", "must be >= 0")
        for name in ("clutter_density", "noise_rate", "occlusion_fraction"):
            value = getattr(self, name)
            _require(0.0 <= value <= 1.0, f"{key}.{name}", "must lie in [0, 1]")
        for placement in self.placements:
            missing = {"object_id", "pose_index", "x", "y"} - set(placement)
            _require(not missing, f"{key}.placements", f"missing keys {sorted(missing)}")


@dataclass
class DatasetConfig:
    n_objects: int = 1
    patch_size: int = 16
    location_step: int = 2
    base_distance: float = 700.0
    pose_grid: PoseGridConfig = field(default_factory=PoseGridConfig)
    scenes: list = field(default_factory=list)

    def __post_init__(self):
        _require(self.n_objects >= 1, "dataset.n_objects", "must be >= 1")
        _require(self.patch_size >= 4 and self.patch_size % 2 == 0, "dataset.patch_size",
                 "must be an even number >= 4")
        _require(self.location_step >= 1, "dataset.location_step", "must be >= 1")
        _require(self.base_distance > 0, "dataset.base_distance", "must be > 0")
        names = [scene.name for scene in self.scenes]
        _require(len(names) == len(set(names)), "dataset.scenes", "scene names must be unique")


@dataclass
class ForestConfig:
    n_trees: int = 1
    d_prime: int = 8
    n_candidates: int = 32
    fuzzy_margin: float = 1.0
    accept_floor: float = 0.6
    density_floor: float = 0.05
    # None: 8 for a single object, 9 when several objects share the forest
    max_depth: Optional[int] = None
    min_leaf: int = 4
    # subsample used to draw the split threshold between min/max exemplar distance
    tau_subsample: int = 64
    # rejector selectors need at least this share of foreground occurrences
    rejector_min_coverage: float = 0.5
    # "entropy": minimise foreground entropy; "gain": minimise information gain
    rejector_objective: str = "entropy"

    def __post_init__(self):
        _require(self.n_trees >= 1, "forest.n_trees", "must be >= 1")
        _require(self.d_prime >= 1, "forest.d_prime", "must be >= 1")
        _require(self.n_candidates >= 1, "forest.n_candidates", "must be >= 1")
        _require(self.fuzzy_margin >= 0, "forest.fuzzy_margin", "must be >= 0")
        _require(0.0 <= self.accept_floor <= 1.0, "forest.accept_floor", "must lie in [0, 1]")
        _require(0.0 < self.density_floor < 1.0, "forest.density_floor", "must lie in (0, 1)")
        _require(self.max_depth is None or self.max_depth >= 0, "forest.max_depth",
                 "must be >= 0")
        _require(self.min_leaf >= 1, "forest.min_leaf", "must be >= 1")
        _require(self.tau_subsample >= 1, "forest.tau_subsample", "must be >= 1")
        _require(0.0 <= self.rejector_min_coverage <= 1.0, "forest.rejector_min_coverage",
                 "must lie in [0, 1]")
        _require(self.rejector_objective in ("entropy", "gain"), "forest.rejector_objective",
                 "must be 'entropy' or 'gain'")

    def depth_for(self, n_objects):
        if self.max_depth is not None:
            return self.max_depth
        return 8 if n_objects <= 1 else 9


@dataclass
class ValidationConfig:
    chunk_size: int = 16
    alpha: float = 0.5
    use_depth: bool = True
    depth_tolerance: float = 50.0
    plan_seed: int = 0
    confirm_winner: bool = True

    def __post_init__(self):
        _require(self.chunk_size >= 1, "validation.chunk_size", "must be >= 1")
        _require(self.depth_tolerance > 0, "validation.depth_tolerance", "must be > 0")


@dataclass
class PipelineConfig:
    k_m: float = 0.1
    pose_tolerance: float = 15.0
    nms_overlap: float = 0.5
    min_score: float = 0.75
    use_pyramid: bool = True
    # windows whose median depth falls outside this band are skipped; null disables the gate
    depth_range: Optional[tuple] = (300.0, 2000.0)
    workers: Optional[int] = None

    def __post_init__(self):
        if self.depth_range is not None:
            self.depth_range = tuple(float(v) for v in self.depth_range)
            _require(len(self.depth_range) == 2 and self.depth_range[0] < self.depth_range[1],
                     "pipeline.depth_range", "needs [near, far] with near < far")
        _require(self.k_m > 0, "pipeline.k_m", "must be > 0")
        _require(self.pose_tolerance >= 0, "pipeline.pose_tolerance", "must be >= 0")
        _require(0.0 <= self.nms_overlap <= 1.0, "pipeline.nms_overlap", "must lie in [0, 1]")
        _require(self.workers is None or self.workers >= 1, "pipeline.workers", "must be >= 1")

    @property
    def worker_count(self):
        return self.workers or os.cpu_count() or 1


@dataclass
class BenchConfig:
    suites: tuple = ("templates", "trees", "objects", "validation", "oracle", "rejection")
    template_sizes: tuple = (250, 500, 1000, 2000, 4000)
    tree_counts: tuple = (1, 5)
    object_counts: tuple = (1, 5, 12)
    n_scenes: int = 10
    scene_size: tuple = (64, 64)
    objects_per_scene: int = 2
    noise_rate: float = 0.1
    clutter_density: float = 0.3
    occlusion_fraction: float = 0.0
    queries_per_size: int = 200
    oracle_windows: int = 500
    agreement_trials: int = 1000

    def __post_init__(self):
        known = {"templates", "trees", "objects", "validation", "oracle", "rejection"}
        self.suites = tuple(self.suites)
        unknown = set(self.suites) - known
        _require(not unknown, "bench.suites", f"unknown suites {sorted(unknown)}")
        self.template_sizes = tuple(int(v) for v in self.template_sizes)
        self.tree_counts = tuple(int(v) for v in self.tree_counts)
        self.object_counts = tuple(int(v) for v in self.object_counts)
        self.scene_size = tuple(int(v) for v in self.scene_size)
        _require(all(v > 0 for v in self.template_sizes), "bench.template_sizes", "must be > 0")
        _require(self.n_scenes >= 1, "bench.n_scenes", "must be >= 1")


@dataclass
class OutputConfig:
    directory: str = "out"


@dataclass
class RunConfig:
    master_seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def snapshot(self):
        """Plain JSON-friendly dict of the whole configuration."""
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# Nested sections and list-of-section fields, by (class, field name).
_NESTED = {
    (RunConfig, "features"): FeatureConfig,
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "forest"): ForestConfig,
    (RunConfig, "validation"): ValidationConfig,
    (RunConfig, "pipeline"): PipelineConfig,
    (RunConfig, "bench"): BenchConfig,
    (RunConfig, "output"): OutputConfig,
    (DatasetConfig, "pose_grid"): PoseGridConfig,
}
_NESTED_LISTS = {
    (DatasetConfig, "scenes"): SceneConfig,
}


def build_section(cls, raw, where):
    """Build dataclass `cls` from a mapping, rejecting keys it does not know."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        nested = _NESTED.get((cls, key))
        nested_list = _NESTED_LISTS.get((cls, key))
        if nested is not None:
            kwargs[key] = build_section(nested, value, f"{where}.{key}")
        elif nested_list is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list")
            kwargs[key] = [build_section(nested_list, item, f"{where}.{key}[{i}]")
                           for i, item in enumerate(value)]
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw):
    return build_section(RunConfig, raw, "config")


def load_config(path):
    """Read a YAML run configuration. Raises ConfigError on any problem."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    config = config_from_dict(raw or {})
    logger.debug("Loaded config %s (master_seed=%d)", path, config.master_seed)
    return config
