"""Experiment configuration: strict JSON round-trip and problem construction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np

from .field import FieldConfig
from .geometry import transform_points
from .metrics import RayFan
from .optim import Problem, TrainConfig
from .rasterizer import RenderConfig
from .raycomp import FramePlan
from .scene import LidarSpec, SceneRecipe, frame_ground_truth, generate_scene, make_camera_rig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple = (32, 32, 8)
    n_frames: int = 3
    recipe: SceneRecipe = SceneRecipe()


@dataclass(frozen=True)
class RigSpec:
    n_cams: int = 6
    fov_deg: float = 90.0
    resolution: tuple = (64, 48)
    height: float = 0.5
    pitch_deg: float = 0.0
    near_plane: float = 0.1
    yaw_offset_deg: float = 0.0

    def build(self):
        return make_camera_rig(self.n_cams, None, self.fov_deg, self.resolution, self.height,
                               self.pitch_deg, self.near_plane, self.yaw_offset_deg)


@dataclass(frozen=True)
class TrainSpec:
    """Scalar training knobs; the nested configs live at the top level of the experiment."""
    steps: int = 500
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: bool = True
    lr_floor: float = 0.01
    rc_mode: str = "feature"
    snapshot_every: int = 0
    clip_norm: float | None = 10.0
    lambda_depth: float = 1.0
    balance_exponent: float = 1.0
    mu_lr_factor: float = 1.0
    scale_lr_factor: float = 1.0
    opacity_lr_factor: float = 1.0
    logits_lr_factor: float = 1.0
    rotation_lr_factor: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    scene: SceneSpec = SceneSpec()
    rig: RigSpec = RigSpec()
    lidar: LidarSpec = LidarSpec()
    field: FieldConfig = FieldConfig()
    train: TrainSpec = TrainSpec()
    frames: FramePlan = FramePlan()
    render: RenderConfig = RenderConfig()
    fan: RayFan = RayFan()
    current_frame: int | None = None
    out: str = "out"

    def train_config(self) -> TrainConfig:
        return TrainConfig(frame_plan=self.frames, field_config=self.field, render=self.render,
                           seed=self.seed, **asdict(self.train))

    def current(self) -> int:
        if self.current_frame is not None:
            return int(self.current_frame)
        back = -min([k for k in self.frames.offsets if k < 0], default=0)
        return min(back, self.scene.n_frames - 1)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_plain(cls, d, "config")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


_NESTED = {
    (ExperimentConfig, "scene"): SceneSpec,
    (ExperimentConfig, "rig"): RigSpec,
    (ExperimentConfig, "lidar"): LidarSpec,
    (ExperimentConfig, "field"): FieldConfig,
    (ExperimentConfig, "train"): TrainSpec,
    (ExperimentConfig, "frames"): FramePlan,
    (ExperimentConfig, "render"): RenderConfig,
    (ExperimentConfig, "fan"): RayFan,
    (SceneSpec, "recipe"): SceneRecipe,
}


def _coerce(value, default):
    if isinstance(default, tuple) or isinstance(value, list):
        return tuple(_coerce(v, None) if isinstance(v, list) else v for v in value)
    if isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
        return float(value)
    return value


def _from_plain(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kw = {}
    for name, value in d.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kw[name] = _from_plain(sub, value, f"{path}.{name}")
        elif cls is SceneRecipe and name == "boxes":
            kw[name] = tuple(dict(b) for b in value)
        else:
            kw[name] = _coerce(value, getattr(defaults, name))
    try:
        return replace(defaults, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class Experiment:
    config: ExperimentConfig
    scene: object
    rig: list
    problem: Problem
    gts: dict = field(default_factory=dict)


def ray_origins(scene, current: int, height: float) -> np.ndarray:
    """Ego positions of every frame, expressed in the current frame, at sensor height."""
    pts = [transform_points(scene.relative_pose(f, current), np.array([[0.0, 0.0, height]]))[0]
           for f in range(scene.n_frames)]
    return np.array(pts)


def build_experiment(cfg: ExperimentConfig, frames_needed=None, scene=None) -> Experiment:
    """Generate (or adopt) the scene, then build the rig and per-frame 2D labels of ``cfg``."""
    sc = cfg.scene
    if scene is None:
        scene = generate_scene(cfg.seed, sc.dims, sc.n_frames, sc.recipe)
    rig = cfg.rig.build()
    cur = cfg.current()
    if frames_needed is None:
        frames_needed = {cur}
        if cfg.train.rc_mode != "off":
            frames_needed |= {cur + k for k in cfg.frames.offsets}
    bad = [f for f in frames_needed if not 0 <= f < scene.n_frames]
    if bad:
        raise ConfigError(f"frame plan needs frames {sorted(bad)} outside the {scene.n_frames}-frame sequence")
    gts = {}
    for f in sorted(frames_needed):
        # adjacent frames only supervise returns the current-frame volume can represent
        vol = None if f == cur else (scene.geometry, scene.relative_pose(f, cur))
        gts[f] = frame_ground_truth(scene, f, rig, cfg.lidar, vol)
    problem = Problem(scene, rig, gts, cur, ray_origins(scene, cur, cfg.lidar.height), cfg.fan)
    return Experiment(cfg, scene, rig, problem, gts)
