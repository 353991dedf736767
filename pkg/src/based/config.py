"""Run configuration: nested dataclasses, JSON files, presets and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path

from .fields import EncodingConfig, FieldConfig, MlpConfig


class ConfigError(ValueError):
    pass


@dataclass
class Schedule:
    pose_joint_iters: int = 200
    total_iters: int = 100200
    rays_per_image: int = 64  # stage 1, per training frame
    stage2_rays: int = 1024  # stage 2, from the single sampled frame
    corr_batch: int = 512
    lr: float = 5e-4
    pose_lr: float | None = None  # defaults to lr
    deform_hold_iters: int = 0  # deformation field is not updated for these first iterations
    checkpoint_every: int = 1000

    def validate(self):
        if not 0 <= self.pose_joint_iters < self.total_iters:
            raise ConfigError("need 0 <= pose_joint_iters < total_iters")
        if self.deform_hold_iters < 0:
            raise ConfigError("deform_hold_iters must be non-negative")
        if min(self.rays_per_image, self.stage2_rays, self.corr_batch) < 1:
            raise ConfigError("batch sizes must be positive")
        if self.lr <= 0 or any(x is not None and x <= 0 for x in (self.pose_lr,)):
            raise ConfigError("learning rates must be positive")


@dataclass
class LossWeights:
    w_pho: float = 1.0
    w_corr: float = 0.1
    w_depth: float = 0.5
    huber_delta: float = 0.05
    confidence_threshold: float = 0.5
    corr_time: str = "target"  # "target" uses t_b for the second point; "literal" reuses t_a

    def validate(self):
        if min(self.w_pho, self.w_corr, self.w_depth) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")
        if self.corr_time not in ("target", "literal"):
            raise ConfigError("corr_time must be 'target' or 'literal'")


@dataclass
class RenderConfig:
    n_samples: int = 64
    sampling: str = "mixed"  # stratified | depth-guided | mixed
    gaussian_scale: float = 0.01  # fraction of (far - near)
    tool_weight: float = 4.0
    depth_mode: str = "expected"  # expected | reciprocal_density
    eval_samples: int = 128
    chunk: int = 2048

    def validate(self):
        if self.n_samples < 2 or self.eval_samples < 2:
            raise ConfigError("need at least 2 samples per ray")
        if self.sampling not in ("stratified", "depth-guided", "mixed"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.depth_mode not in ("expected", "reciprocal_density"):
            raise ConfigError(f"unknown depth mode {self.depth_mode!r}")
        if self.tool_weight <= 1 or self.gaussian_scale <= 0:
            raise ConfigError("tool_weight must exceed 1 and gaussian_scale be positive")


@dataclass
class Config:
    schedule: Schedule = dc_field(default_factory=Schedule)
    loss: LossWeights = dc_field(default_factory=LossWeights)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    log_wall_time: bool = True
    median_scaling: bool = False

    def validate(self) -> "Config":
        self.schedule.validate()
        self.loss.validate()
        self.render.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return _build(cls, d, "")

    def apply_overrides(self, overrides) -> "Config":
        data = self.to_dict()
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = data
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return Config.from_dict(data).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        sub = _nested.get((cls, key))
        if sub is not None and value is not None:
            value = _build(sub, value, prefix + key + ".")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


_nested = {
    (Config, "schedule"): Schedule,
    (Config, "loss"): LossWeights,
    (Config, "field"): FieldConfig,
    (Config, "render"): RenderConfig,
    (FieldConfig, "enc"): EncodingConfig,
    (FieldConfig, "mlp_deform"): MlpConfig,
    (FieldConfig, "mlp_canon"): MlpConfig,
}


def desk_preset() -> Config:
    """Laptop-scale settings used by the test-suite and the bundled synthetic scene."""
    return Config(
        schedule=Schedule(pose_joint_iters=200, total_iters=3200, rays_per_image=32,
                          stage2_rays=128, corr_batch=512, lr=5e-3, pose_lr=1e-2,
                          deform_hold_iters=100, checkpoint_every=500),
        loss=LossWeights(w_corr=100.0),
        field=FieldConfig(mlp_deform=MlpConfig(4, 64, None), mlp_canon=MlpConfig(4, 64, 2)),
        render=RenderConfig(n_samples=32, eval_samples=64),
    )


PRESETS = {"full": Config, "desk": desk_preset}


def load_config(path=None, preset: str = "desk", overrides=()) -> Config:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        merged = _merge(cfg.to_dict(), data)
        cfg = Config.from_dict(merged)
    return cfg.apply_overrides(overrides)


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
