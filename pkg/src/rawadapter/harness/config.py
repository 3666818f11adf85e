"""Run configuration: a flat set of keys, loadable from a TOML file and overridable per key."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

MODES = ("normal", "dark", "overexp")


@dataclass
class RunConfig:
    mode: str = "dark"
    use_pk: bool = True
    use_pm: bool = True
    use_lut: bool = True
    use_m: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_step: int = 0
    lr_gamma: float = 0.5
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    pretrained: str = ""
    freeze_backbone: bool = False  # backbone only; the head always trains
    lut_dim: int = 32
    delta_r: float = 0.01
    delta_s: float = 0.02
    mean_shift_noise: bool = False
    degrade_seed: int = 1
    dataset: str = ""
    n_scenes: int = 200
    data_seed: int = 0
    val_fraction: float = 0.2
    pretrain_epochs: int = 30

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lut_dim <= 0:
            raise ValueError("lut_dim must be positive")

    @property
    def toggles(self) -> dict:
        return {"use_pk": self.use_pk, "use_pm": self.use_pm, "use_lut": self.use_lut, "use_m": self.use_m}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k].type, v) for k, v in values.items()})


def _coerce(type_name, value):
    kind = type_name if isinstance(type_name, str) else type_name.__name__
    if kind == "bool":
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return RunConfig.from_dict(tomllib.load(fh))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()))


def config_fields() -> list:
    return [(f.name, f.type if isinstance(f.type, str) else f.type.__name__, f.default) for f in fields(RunConfig)]
