"""Experiment configuration schema."""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = 1
METHODS = ("ours", "sars_only", "reservoir_replay", "finetune", "joint")
Method = Literal["ours", "sars_only", "reservoir_replay", "finetune", "joint"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScenesConfig(_Strict):
    n_scenes: int = Field(3, ge=1)
    box_size: tuple[float, float, float] = (4.0, 4.0, 3.0)
    spacing: float = Field(10.0, gt=0)
    landmarks: int = Field(600, ge=50)
    frames_per_scene: int = Field(1875, ge=10)
    clustering: float = Field(0.7, ge=0.0, le=1.0)
    points_per_frame: int = Field(48, ge=12)
    noise_sigma: float = Field(0.02, ge=0.0)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    feature_dim: int = Field(32, ge=1)
    code_dim: int = Field(8, ge=1)
    code_noise: float = Field(0.3, ge=0.0)
    style_scale: float = Field(1.0, ge=0.0)
    n_freq: int = Field(12, ge=1)
    freq_scale: float = Field(1.0, gt=0)
    n_view_freq: int = Field(0, ge=0)
    view_freq_scale: float = Field(0.5, gt=0)
    view_strength: float = Field(0.0, ge=0)
    half_angle_deg: float = Field(45.0, gt=0, lt=90)
    max_range: Optional[float] = Field(None, gt=0)
    orbit_fraction: float = Field(0.6, gt=0, lt=1)
    jitter_deg: float = Field(4.0, ge=0)

    @model_validator(mode="after")
    def _box(self):
        if min(self.box_size) <= 0:
            raise ValueError("box_size entries must be positive")
        if self.spacing <= self.box_size[0]:
            raise ValueError("spacing must exceed box_size[0] so scene boxes stay disjoint")
        return self


class ModelConfig(_Strict):
    hidden_dim: int = Field(64, ge=1)
    K: int = Field(64, ge=1)
    head_mode: Literal["blend", "literal"] = "blend"


class TrainConfig(_Strict):
    iterations_per_scene: int = Field(3000, ge=1)
    batch_frames: int = Field(4, ge=1)
    replay_batch_frames: Optional[int] = Field(None, ge=1)
    lr: float = Field(0.005, gt=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    lr_final_fraction: float = Field(0.05, ge=0, le=1)
    weight_decay: float = Field(1e-4, ge=0)
    grad_clip: float = Field(10.0, ge=0)
    pose_clamp_m: float = Field(100.0, gt=0)
    replay_pose_weight: float = Field(1.0, ge=0)
    # With distillation on, also supervise replay samples with stored ground truth.
    distill_with_replay_pose: bool = True


class SarsConfigModel(_Strict):
    capacity_fraction: float = Field(0.1, gt=0, le=1)
    radius: float = Field(0.5, ge=0)
    lam: float = Field(1.0, ge=0)
    radius_scope: Literal["global", "scene"] = "global"
    normalization: Literal["scene", "global"] = "scene"


class DistillConfig(_Strict):
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(1.0, ge=0)
    tau: float = Field(2.0, gt=0)
    active_size: int = Field(50, ge=1)


class BoundsConfig(_Strict):
    q_min: float = Field(0.1, gt=0)
    q_max: float = Field(100.0, gt=1)

    @model_validator(mode="after")
    def _order(self):
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be smaller than q_max")
        return self


class EvalConfig(_Strict):
    translation_threshold_m: Optional[float] = Field(None, gt=0)
    translation_threshold_frac: float = Field(0.05, gt=0)
    rotation_threshold_deg: float = Field(5.0, gt=0)
    ransac_threshold_frac: float = Field(0.05, gt=0)
    ransac_iterations: int = Field(64, ge=1)
    tfr_clamp: bool = True


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    method: Method = "ours"
    scenes: ScenesConfig = ScenesConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    sars: SarsConfigModel = SarsConfigModel()
    distill: DistillConfig = DistillConfig()
    bounds: BoundsConfig = BoundsConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _continual_needs_scenes(self):
        if self.method not in ("joint",) and self.scenes.n_scenes < 1:
            raise ValueError("at least one scene is required")
        if self.model.K < self.scenes.n_scenes:
            raise ValueError("model.K must be at least scenes.n_scenes")
        return self

    def with_(self, **updates) -> ExperimentConfig:
        return self.model_validate({**self.model_dump(), **updates})

    def config_hash(self) -> str:
        """Hash of everything except ``method`` and ``seed``."""
        body = self.model_dump(mode="json", exclude={"method", "seed"})
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides (values parsed as JSON when possible)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return doc


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    if overrides:
        doc = apply_overrides(doc, overrides)
    return ExperimentConfig.model_validate(doc)
