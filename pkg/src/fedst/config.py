"""Experiment configuration: a flat record whose field names are exactly the
keys accepted in config files and flag overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

OUTPUT_ROOT_ENV = "FEDST_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data source: a file path, or the synthetic generator when absent
    data_path: str | None = None
    data_format: str | None = None
    partition_strategy: str = "contiguous-blocks"
    partition_index_path: str | None = None
    synth_nodes_per_client: int = 10
    synth_t_total: int = 2880
    synth_prototypes: int = 3
    synth_amplitude: float = 4.0
    synth_noise_std: float = 1.0
    # task shape
    clients: int = 4
    lookback: int = 12
    horizon: int = 12
    train_frac: float = 0.6
    val_frac: float = 0.2
    # training
    rounds: int = 100
    local_epochs: int = 1
    lr: float = 0.005
    batch_size: int = 64
    momentum_alpha: float = 0.5
    similarity_tau: float = 0.3
    top_k: int = 3
    global_patterns: int = 16
    personal_patterns: int = 64
    mi_weight: float = 0.1
    fusion_temperature: float = 0.5
    prox_mu: float = 0.01
    mode: str = "feddis"
    # ablation toggles
    no_cd: bool = False
    no_gp: bool = False
    no_wu: bool = False
    no_cps: bool = False
    init_strategy: str = "default"
    # model widths
    hidden_dim: int = 64
    embed_dim: int = 10
    # evaluation
    mape_mask_threshold: float = 0.1
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if self.mode not in ("feddis", "fedavg", "fedprox"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.init_strategy not in ("default", "random", "xavier", "kaiming", "random+pca-whiten"):
            raise ConfigError(f"unknown init_strategy {self.init_strategy!r}")
        if not 0.0 <= self.momentum_alpha <= 1.0:
            raise ConfigError("momentum_alpha must lie in [0, 1]")
        if self.train_frac + self.val_frac >= 1.0:
            raise ConfigError("train_frac + val_frac must leave room for a test split")

    @property
    def splits(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, 1.0 - self.train_frac - self.val_frac)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return ExperimentConfig(**mapping)


def load_config_file(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a flat key-value mapping")
    return config_from_mapping(raw)


def _coerce(name: str, value: str):
    """Coerce a command-line override string to the field's declared type."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key: {name}")
    if value.lower() in ("none", "null"):
        return None
    ftype = _FIELDS[name].type
    if "bool" in str(ftype):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if "int" in str(ftype):
        return int(value)
    if "float" in str(ftype):
        return float(value)
    return value


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    return cfg.replace(**{k: _coerce(k, v) for k, v in overrides.items()})


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output_dir(cfg: ExperimentConfig, default_name: str) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root() / default_name
