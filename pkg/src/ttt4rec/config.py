"""Run and grid configuration files (YAML) with strict key checking."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .training import TrainConfig

DEFAULT_SIGMAS = (0.005, 0.01, 0.02, 0.05, 0.1)
DEFAULT_MINI_BATCH_SIZES = (1, 5, 10, 20)


class ConfigError(ValueError):
    pass


@dataclass
class ModelSettings:
    embed_dim: int = 64
    mlp_hidden: int | None = None
    max_seq_len: int | None = None  # None: take it from the dataset cache
    inner_lr: float = 1.0
    mini_batch_size: int = 1
    initializer_range: float = 0.1

    def resolve(self, vocab_size: int, dataset_max_len: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            mlp_hidden=self.mlp_hidden,
            max_seq_len=self.max_seq_len or dataset_max_len,
            inner_lr=self.inner_lr,
            mini_batch_size=self.mini_batch_size,
            initializer_range=self.initializer_range,
        )


@dataclass
class TrainSettings:
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 256
    eval_every_epoch: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    precision: str = "float32"
    train_targets: str = "last"
    timing: bool = False

    def resolve(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str | None = None
    seed: int = 0
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def to_dict(self) -> dict:
        return asdict(self)


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**data)


def run_config_from_dict(data: dict | None) -> RunConfig:
    data = copy.deepcopy(data or {})
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping")
    model = _strict(ModelSettings, data.pop("model", {}) or {}, "model")
    train = _strict(TrainSettings, data.pop("train", {}) or {}, "train")
    cfg = _strict(RunConfig, data, "config")
    cfg.model, cfg.train = model, train
    return cfg


def load_yaml(path) -> Any:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc


def load_run_config(path) -> RunConfig:
    cfg = run_config_from_dict(load_yaml(path))
    # relative paths in a config file are relative to that file
    base = Path(path).parent
    if cfg.dataset and not Path(cfg.dataset).is_absolute():
        cfg.dataset = str(base / cfg.dataset)
    return cfg


def dump_yaml(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")
    return path


@dataclass
class GridSpec:
    base: RunConfig
    initializer_range: list[float] = field(default_factory=lambda: list(DEFAULT_SIGMAS))
    mini_batch_size: list[int] = field(default_factory=lambda: list(DEFAULT_MINI_BATCH_SIZES))
    out: str | None = None

    def __post_init__(self):
        if not self.initializer_range or not self.mini_batch_size:
            raise ConfigError("grid axes must be non-empty")

    def cells(self) -> list[tuple[float, int]]:
        return [(s, b) for s in self.initializer_range for b in self.mini_batch_size]


def load_grid_spec(path) -> GridSpec:
    data = load_yaml(path) or {}
    if not isinstance(data, dict):
        raise ConfigError("grid spec: expected a mapping")
    unknown = sorted(set(data) - {"base", "initializer_range", "mini_batch_size", "out"})
    if unknown:
        raise ConfigError(f"grid spec: unknown key(s) {', '.join(unknown)}")
    base = data.get("base") or {}
    if isinstance(base, str):
        base_path = Path(path).parent / base
        base_cfg = load_run_config(base_path)
    else:
        base_cfg = run_config_from_dict(base)
        if base_cfg.dataset and not Path(base_cfg.dataset).is_absolute():
            base_cfg.dataset = str(Path(path).parent / base_cfg.dataset)
    kwargs = {"base": base_cfg, "out": data.get("out")}
    if "initializer_range" in data:
        kwargs["initializer_range"] = [float(x) for x in data["initializer_range"]]
    if "mini_batch_size" in data:
        kwargs["mini_batch_size"] = [int(x) for x in data["mini_batch_size"]]
    return GridSpec(**kwargs)
