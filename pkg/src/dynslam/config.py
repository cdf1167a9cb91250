"""Configuration dataclasses and their YAML (de)serialisation.

Every threshold used by the front end and the back end lives here with its
default. A YAML file may override any subset; unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, ConfigInvalid


@dataclass
class NoiseConfig:
    sigma_p: float = 1.0
    sigma_phi: float = 3.0
    huber_delta_2d: float = 1.345
    inlier_threshold_px: float = 2.0
    scene_flow_threshold: float = 0.12
    dynamic_ratio: float = 0.30
    feature_budget: int = 1200
    feature_min_distance: int = 3
    object_sample_stride: int = 3
    object_replenish_fraction: float = 0.3
    min_track_len_graph: int = 3
    max_object_depth: float = 40.0
    max_missed_frames: int = 5
    reanchor_gate: float = 4.0          # world-space gate on re-anchored points, in point-sigma units
    min_object_points: int = 3
    ransac_iterations: int = 200
    ransac_confidence: float = 0.95
    tracking_max_iterations: int = 30

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0:
                raise ConfigInvalid(f"noise.{f.name} must be strictly positive, got {v!r}")
        if not 0.0 < self.dynamic_ratio < 1.0:
            raise ConfigInvalid("noise.dynamic_ratio must lie in (0, 1)")
        if not 0.0 < self.object_replenish_fraction <= 1.0:
            raise ConfigInvalid("noise.object_replenish_fraction must lie in (0, 1]")


@dataclass
class GraphConfig:
    # twist ordering in all 6-vectors is (translation, rotation)
    sigma_point: float = 0.05
    point_depth_scale_from: float = 10.0
    sigma_odometry: list = field(default_factory=lambda: [0.05, 0.05, 0.05, 0.01, 0.01, 0.01])
    sigma_motion: float = 0.1
    sigma_smooth: list = field(default_factory=lambda: [0.01, 0.01, 0.01, 0.001, 0.001, 0.001])
    sigma_prior: float = 1e-4
    robust: bool = True
    lm_lambda0: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.1
    lm_max_iterations: int = 100
    lm_rel_tol: float = 1e-8
    local_max_iterations: int = 10

    def validate(self):
        if len(self.sigma_odometry) != 6 or len(self.sigma_smooth) != 6:
            raise ConfigInvalid("graph sigma vectors must have 6 entries")
        vals = [self.sigma_point, self.sigma_motion, self.sigma_prior, *self.sigma_odometry,
                *self.sigma_smooth]
        if min(vals) <= 0:
            raise ConfigInvalid("graph sigmas must be strictly positive")
        if self.lm_max_iterations < 1:
            raise ConfigInvalid("graph.lm_max_iterations must be >= 1")


@dataclass
class RunConfig:
    input: str = ""
    output: str = ""
    seed: int = 0
    frame_rate: float = 10.0
    window_size: int = 20
    local_ba: bool = True
    global_ba: bool = True
    joint_flow: bool = True
    smooth_motion: bool = True
    mask_propagation: bool = True
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)

    def validate(self):
        if self.window_size < 1:
            raise ConfigInvalid("window_size must be >= 1")
        if self.frame_rate <= 0:
            raise ConfigInvalid("frame_rate must be positive")
        self.noise.validate()
        self.graph.validate()
        return self


_NESTED = {"noise": NoiseConfig, "graph": GraphConfig}


def _coerce(cls, name, value):
    default = getattr(cls(), name)
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigInvalid(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigInvalid(f"{name}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigInvalid(f"{name}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        return [float(x) for x in value]
    return value


def _update(obj, data: dict, prefix=""):
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigInvalid(f"unknown config key {prefix}{key!r}")
        if key in _NESTED and isinstance(obj, RunConfig):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"{key} must be a mapping")
            _update(getattr(obj, key), value, prefix=f"{key}.")
        else:
            setattr(obj, key, _coerce(type(obj), key, value))


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = RunConfig()
    if data:
        _update(cfg, data)
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"malformed YAML in {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigInvalid(f"config {path} must be a mapping")
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted ``section.field`` overrides, e.g. ``{"noise.sigma_p": 2}``."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigInvalid(f"unknown config key {dotted!r}")
            target = getattr(target, p)
        _update(target, {parts[-1]: value}, prefix=".".join(parts[:-1]) + ("." if len(parts) > 1 else ""))
    return cfg.validate()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
