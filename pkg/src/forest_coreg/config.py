"""Pipeline configuration: one dataclass per stage, loadable from TOML.

Every key is optional; a TOML file only needs the values it overrides::

    seed = 7
    [fine]
    min_fitness = 0.4
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class PreprocessConfig:
    crop_padding: float = 10.0
    crop_max_half_extent: float = 25.0
    normal_k: int = 16
    ground_band_fraction: float = 0.3
    ground_normal_max_deg: float = 30.0
    ransac_threshold: float = 0.10
    ransac_iterations: int = 1000
    ransac_confidence: float = 0.99


@dataclass
class FeatureConfig:
    chm_resolution: float = 0.5
    nms_window_m: float = 2.0
    min_peak_height: float = 5.0
    slice_low: float = 0.5
    slice_high: float = 5.0
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 20
    cluster_voxel: float = 0.1
    cylinder_threshold: float = 0.03
    cylinder_iterations: int = 200
    cylinder_min_inliers: int = 30


@dataclass
class CoarseConfig:
    tau: float = 0.5
    min_matches: int = 4
    max_graph_vertices: int = 10_000


@dataclass
class FineConfig:
    max_corr_dist: float = 0.5
    max_iter: int = 50
    voxel_size: float = 0.1
    min_fitness: float = 0.3
    min_inliers: int = 500


@dataclass
class GraphConfig:
    grid_sigma_t: float = 0.1
    grid_sigma_r: float = 0.02
    prior_min_sigma_t: float = 0.05
    prior_sigma_r: float = 0.01
    huber_delta: float = 0.5
    max_iterations: int = 100
    step_tol: float = 1e-8
    cost_tol: float = 1e-10


@dataclass
class AnalysisConfig:
    max_dist: float = 1.0
    error_voxel: float = 0.1
    occupancy_resolution: float = 0.05
    occupancy_bin_height: float = 1.0
    occupancy_max_height: float = 40.0
    segmentation_radius: float = 4.0
    traits: bool = True


@dataclass
class Config:
    seed: int = 0
    workers: int = 1
    tile_size: float = 20.0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    fine: FineConfig = field(default_factory=FineConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _build(cls, data, "config")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ValueError(f"{where}: unknown key {key!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(f"{where}.{key}: expected a boolean")
            kwargs[key] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"{where}.{key}: expected an integer")
            kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{where}.{key}: expected a number")
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    with open(Path(path), "rb") as fh:
        data = tomllib.load(fh)
    return Config.from_dict(data)
