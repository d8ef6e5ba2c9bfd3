"""Layered experiment configuration: built-in defaults, a YAML file, then
command-line overrides (section.key=value).

The defaults encode the training recipe used throughout: Adam betas
(0.5, 0.999) for the adversarial stage, 128 x 64 training images, a 20
degree rotation bound, three clusters per body joint, twelve canonical
poses from a full-body Gaussian mixture, and fusion dropout 0.6.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentConfig
from .clustering import ClusterConfig
from .fusion import FusionTrainConfig
from .toydata import ToySpec
from .training import GanTrainConfig

OUTPUT_ROOT_ENV = "PTREID_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetSection:
    root: str = ""
    naming: str = "flat"  # flat | market1501
    protocol: str = "toy"
    pose_dir: str = ""  # defaults to <root>/poses
    cuhk03_test_identities: int = 100
    toy: ToySpec = field(default_factory=ToySpec)


@dataclass(frozen=True)
class GanSection:
    descriptor_dim: int = 2048
    image_size: tuple[int, int] = (128, 64)
    base_channels: int = 32
    residual_blocks: int = 6
    conditioning: str = "vector"  # vector | heatmap
    backbone_variant: str = "toy"  # toy | generic | reid_finetuned
    backbone_base_channels: int = 32
    backbone_epochs: int = 20
    backbone_lr: float = 1e-3
    backbone_patience: int = 10
    f1_weights_manifest: str = ""
    f2_weights_manifest: str = ""
    augment: bool = True
    train: GanTrainConfig = field(default_factory=GanTrainConfig)


@dataclass(frozen=True)
class FusionSection:
    num_generated: int = 0  # 0 means: follow cluster.num_poses
    train: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    augment: bool = False


@dataclass(frozen=True)
class EvalSection:
    metric: str = "euclidean"
    multi_query: bool = False
    rerank: bool = False
    rerank_k1: int = 20
    rerank_k2: int = 6
    rerank_lambda: float = 0.3
    max_rank: int = 20
    descriptor_source: str = "fused"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    gan: GanSection = field(default_factory=GanSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def num_generated(self) -> int:
        return self.fusion.num_generated or self.cluster.num_poses

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV, "")
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    if isinstance(value, dict):
        raise ConfigError(f"{path}: expected a scalar or list")
    if target_type in (tuple, list) or (isinstance(value, (list, tuple))):
        return tuple(value)
    return value


def _build(cls: type, data: dict, path: str = "") -> Any:
    """Construct a (possibly nested) config dataclass from a plain dict."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    field_types = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in field_types:
            raise ConfigError(f"unknown config key {path + key!r}")
        f = field_types[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            merged = dataclasses.asdict(default)
            if isinstance(value, dict):
                sub = _merge_dicts(merged, value, path + key + ".")
            else:
                raise ConfigError(f"{path + key}: expected a mapping")
            kwargs[key] = _build(type(default), sub, path + key + ".")
        else:
            kwargs[key] = _coerce(value, type(default), path + key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration under {path or 'root'}: {exc}") from exc


def _merge_dicts(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge_dicts(out[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def _flatten_defaults() -> dict:
    return dataclasses.asdict(ExperimentConfig())


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Resolve defaults < YAML file < key=value overrides into a config."""
    data = _flatten_defaults()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = _merge_dicts(data, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        keys = dotted.strip().split(".")
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"override {item!r}: unknown section {key!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"override {item!r}: unknown key {keys[-1]!r}")
        node[keys[-1]] = value
    return _build(ExperimentConfig, data)
