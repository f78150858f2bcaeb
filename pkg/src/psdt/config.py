"""JSON run configuration with strict validation.

Unknown keys are rejected, cross-field geometry is checked up front, and
CLI ``--set section.key=value`` overrides are applied before validation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from psdt.lora import DEFAULT_TARGETS
from psdt.model import ConfigError, ModelConfig
from psdt.synthdata import DatasetManifest


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    targets: tuple[str, ...] = DEFAULT_TARGETS
    # baseline ablation: one B shared by every task instead of per-task B_i
    single_b: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 32
    t_dist: str = "uniform"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"flow steps must be >= 1, got {self.steps}")
        if self.t_dist not in ("uniform", "logit-normal"):
            raise ConfigError(f"unknown t distribution {self.t_dist!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    lora_lr: float = 0.0             # 0 -> use lr for the adapter phase too
    lr_schedule: str = "constant"    # or "cosine" (decay to 0 over the run)
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "lora"               # "lora" or the full fine-tune fallback
    base_pretrain_steps: int = 0
    recraft_steps: int = 1200
    recraft_lr: float = 2e-3
    log_every: int = 100
    checkpoint_every: int = 500
    dtype: str = "float32"

    @property
    def effective_lora_lr(self) -> float:
        return self.lora_lr if self.lora_lr > 0 else self.lr

    def __post_init__(self):
        if self.mode not in ("lora", "full"):
            raise ConfigError(f"train.mode must be 'lora' or 'full', got {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"train.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype must be float32/float64, got {self.dtype!r}")
        if self.batch < 1 or self.steps < 0 or self.base_pretrain_steps < 0:
            raise ConfigError("train.batch must be >= 1 and step counts >= 0")


@dataclass(frozen=True)
class DataConfig:
    counts: dict[str, int] = field(
        default_factory=lambda: {"stroke": 500, "fill": 500, "blocks": 500})
    k_frames: int = 4
    frame_size: int = 16
    global_seed: int = 0
    train_fraction: float = 0.9

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(counts=dict(self.counts), k_frames=self.k_frames,
                               frame_size=self.frame_size, global_seed=self.global_seed,
                               train_fraction=self.train_fraction)

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(self.counts)


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "runs"


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        # dataset geometry must agree with the model's grid
        self.data.manifest()   # validates k/task kinds
        rows, cols = self.data.manifest().grid
        if (rows, cols) != (self.model.grid_rows, self.model.grid_cols):
            raise ConfigError(
                f"data k_frames={self.data.k_frames} implies a {rows}x{cols} grid "
                f"but model is {self.model.grid_rows}x{self.model.grid_cols}")
        if self.data.frame_size != self.model.frame_size:
            raise ConfigError(
                f"data frame_size {self.data.frame_size} != model frame_size "
                f"{self.model.frame_size}")
        if self.model.task_vocab != len(self.data.counts):
            raise ConfigError(
                f"model.task_vocab {self.model.task_vocab} != {len(self.data.counts)} data tasks")


def _build(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(names)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {path!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        fld = names[key]
        if fld.name == "targets" and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(payload: dict) -> Config:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    section_classes = {
        "model": ModelConfig, "lora": LoraConfig, "flow": FlowConfig,
        "train": TrainConfig, "data": DataConfig, "paths": PathsConfig,
    }
    unknown = set(payload) - set(section_classes)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {name: _build(cls, payload.get(name, {}), name)
              for name, cls in section_classes.items()}
    return Config(**kwargs)


def config_to_dict(cfg: Config, include_paths: bool = True) -> dict:
    out = dataclasses.asdict(cfg)
    out["lora"]["targets"] = list(cfg.lora.targets)
    if not include_paths:
        out.pop("paths")
    return out


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(payload)


def apply_overrides(payload: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings onto a raw config dict; values are
    parsed as JSON with a fallback to bare strings."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-object")
        node[parts[-1]] = value
    return payload
