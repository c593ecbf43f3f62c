"""Run configuration: one JSON document with a section per stage.

Every section mirrors a dataclass; unknown keys, wrong types and values the
dataclass rejects all raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DatasetConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .plant import ExcitationConfig, PlantParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 100
    split: str = "test"
    runs_per_pattern: int = 8
    seed: int = 1000
    n_centers: int = 10

    def __post_init__(self):
        if self.horizon < 1 or self.runs_per_pattern < 1 or self.n_centers < 1:
            raise ValueError("horizon, runs_per_pattern and n_centers must be positive")
        if self.split not in ("train", "val", "test"):
            raise ValueError("split must be train, val or test")


@dataclass(frozen=True)
class TransferConfig:
    """Plant B for adaptation: payload mass and tire stiffness scaled from plant A."""

    mass_scale: float = 1.15
    stiffness_scale: float = 0.8
    n_train_windows: int = 2000
    seed: int = 2000
    # Bank-only steps need a smaller rate than pretraining; 1e-3 overshoots the zero-shot bank.
    lr0: float = 1e-4
    epochs: int = 20

    def __post_init__(self):
        if not (self.mass_scale > 0 and self.stiffness_scale > 0 and self.n_train_windows >= 1):
            raise ValueError("transfer scales and window count must be positive")
        if not (self.lr0 > 0 and self.epochs >= 1):
            raise ValueError("transfer lr0 and epochs must be positive")


SECTIONS = {
    "plant": PlantParams,
    "excitation": ExcitationConfig,
    "dataset": DatasetConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "transfer": TransferConfig,
}
NESTED = {(TrainConfig, "losses"): LossWeights}


@dataclass
class RunConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)

    def to_dict(self) -> dict:
        return {name: _to_plain(getattr(self, name)) for name in SECTIONS}

    def with_overrides(self, **sections) -> "RunConfig":
        """Replace fields section-wise, e.g. ``with_overrides(train={"seed": 3})``."""
        d = self.to_dict()
        for sec, values in sections.items():
            d.setdefault(sec, {}).update({k: v for k, v in values.items() if v is not None})
        return parse_config(d)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    return obj


def _check_value(where: str, value, annotation, default):
    """Coerce JSON scalars/lists to the field's type or raise ConfigError."""
    hint = annotation
    if isinstance(hint, str):
        hint = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}.get(hint.split(" ")[0], None)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        hint = args[0] if args else None
        origin = typing.get_origin(hint)
    if hint is None:
        hint = type(default)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                 for x in value):
            raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
        if isinstance(default, tuple) and len(value) != len(default):
            raise ConfigError(f"{where}: expected {len(default)} entries, got {len(value)}")
        return tuple(float(x) for x in value)
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{where}.{key}: unknown key")
        nested = NESTED.get((cls, key))
        if nested is not None:
            kwargs[key] = _build(nested, value, f"{where}.{key}")
        else:
            kwargs[key] = _check_value(f"{where}.{key}", value, hints.get(key), getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"config.{unknown[0]}: unknown section")
    return RunConfig(**{name: _build(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()})


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(data)
