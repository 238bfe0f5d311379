"""Run configuration: nested dataclasses serialized as flat dotted JSON keys."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .losses import LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    classes: int = 32
    per_class: int = 20
    holdout: int = 5
    modalities: tuple = ("image", "audio", "video")
    d_enc: int = 24
    tokens: int = 16
    video_grid: tuple = (8, 2, 2)
    noise: float = 0.5
    shift: int = 1
    shards: int = 2


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 4
    num_latents: int = 4
    num_refs: int = 8
    num_slices: int = 64
    video_grid: tuple = (4, 2, 2)
    max_frames: int = 32
    pooling: str = "aswp"
    modality_latents: bool = True


@dataclass(frozen=True)
class StageConfig:
    steps: int = 300
    lr: float = 2e-3
    min_lr: float = 5e-4
    warmup: int = 15
    batch_size: int = 64
    tasks_per_batch: int = 4
    datasets_per_task: int = 2
    accum: int = 1
    tasks: tuple = ("i2a", "a2i", "i2i", "a2a")
    train_composer: bool = False


@dataclass(frozen=True)
class TrainConfig:
    weight_decay: float = 0.01
    dtype: str = "float32"
    eval_k: int = 5
    eval_tasks: tuple = ("i2a", "a2i", "v2a", "it2i")
    primary_task: str = "i2a"
    eval_batch: int = 256
    class_aware_negatives: bool = True


def _stage2_default() -> StageConfig:
    return StageConfig(
        steps=300,
        lr=4e-4,
        min_lr=0.0,
        warmup=0,
        batch_size=64,
        tasks_per_batch=4,
        datasets_per_task=2,
        accum=2,
        tasks=("i2a", "a2i", "i2i", "a2a", "v2a", "a2v", "i2v", "v2i", "it2i"),
        train_composer=True,
    )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(triplet_raw_cosine=True))
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=_stage2_default)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    v = getattr(value, g.name)
                    flat[f"{f.name}.{g.name}"] = list(v) if isinstance(v, tuple) else v
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        known = base.to_flat()
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**known, **flat}
        top = {}
        sections: dict[str, dict] = {}
        for key, value in merged.items():
            default = known[key]
            value = _coerce(key, value, default)
            if "." in key:
                sec, name = key.split(".", 1)
                sections.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        try:
            for f in dataclasses.fields(cls):
                if f.name in sections:
                    top[f.name] = type(getattr(base, f.name))(**sections[f.name])
            return cls(**top)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def replace(self, **flat) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"loss.mu2": 0.0})``."""
        return RunConfig.from_flat({**self.to_flat(), **flat})

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_flat(data, base)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"), base)


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return tuple(value)
    return value


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig.from_flat(
            {
                "model.num_latents": 64,
                "model.num_refs": 128,
                "model.num_slices": 4096,
                "model.heads": 8,
                "model.dim": 1536,
                "stage1.steps": 1000,
                "stage1.lr": 5e-4,
                "stage1.min_lr": 1e-4,
                "stage1.warmup": 100,
                "stage1.batch_size": 2048,
                "stage1.tasks_per_batch": 4,
                "stage1.accum": 1,
                "stage2.steps": 6000,
                "stage2.lr": 1e-4,
                "stage2.min_lr": 0.0,
                "stage2.warmup": 0,
                "stage2.batch_size": 3072,
                "stage2.tasks_per_batch": 4,
                "stage2.accum": 2,
                "out": "runs/paper",
            }
        )
    raise ConfigError(f"unknown preset {name!r}")
