"""Single self-describing JSON run configuration.

Unknown keys are rejected with the dotted path of the offending field.
Hybrid weights may be given as a preset name or an explicit mapping; an
explicit mapping that merely reorders a preset's values is rejected so the
two preset orderings cannot be confused silently.
"""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .imgio import PhantomConfig
from .losses import (HYBRID_PRESETS, TVERSKY_PRESETS,
                     HybridWeights, LossConfig, TverskyParams)
from .network import NetworkConfig
from .postprocess import PostprocessConfig
from .preprocess import PreprocessConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "NEUROSEG_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str | None = None  # directory in images/ + masks/ layout
    phantom: PhantomConfig | None = None  # generate in memory when no dataset is given
    n_samples: int = 200
    dense_fraction: float = 0.5
    holdout: int = 0  # extra phantoms used as the test set (seeds offset by HOLDOUT_SEED_OFFSET)
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 42

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        if self.dataset is None and self.phantom is None:
            raise ConfigError("data: give either 'dataset' or 'phantom'")
        if self.n_samples < 0 or self.holdout < 0:
            raise ConfigError("data: n_samples and holdout must be >= 0")


@dataclass
class RunConfig:
    data: DataConfig
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    output_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.preprocess.check_depth(self.network.depth)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"run_seed{self.seed}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return build_section(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)


def _hybrid_weights(value, where: str) -> HybridWeights:
    if isinstance(value, str):
        if value not in HYBRID_PRESETS:
            raise ConfigError(f"{where}: unknown preset {value!r}; choose from {sorted(HYBRID_PRESETS)}")
        return HybridWeights.preset(value)
    w = build_section(HybridWeights, value, where)
    vals = dataclasses.astuple(w)
    for name, preset in HYBRID_PRESETS.items():
        if sorted(vals) == sorted(preset) and vals not in HYBRID_PRESETS.values():
            raise ConfigError(f"{where}: weights {vals} reorder preset {name!r} {preset}; "
                              f"use a preset name to pick an ordering")
    return w


def _tversky(value, where: str) -> TverskyParams:
    if isinstance(value, str):
        if value not in TVERSKY_PRESETS:
            raise ConfigError(f"{where}: unknown preset {value!r}; choose from {sorted(TVERSKY_PRESETS)}")
        return TverskyParams(*TVERSKY_PRESETS[value])
    return build_section(TverskyParams, value, where)


_SPECIAL = {HybridWeights: _hybrid_weights, TverskyParams: _tversky}


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def build_section(cls, data, where: str):
    """Build dataclass ``cls`` from a JSON mapping; unknown keys are an error."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        tp = _unwrap_optional(hints[key])
        if tp in _SPECIAL:
            kwargs[key] = _SPECIAL[tp](value, path)
        elif dataclasses.is_dataclass(tp) and value is not None:
            kwargs[key] = build_section(tp, value, path)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def set_override(d: dict, dotted: str, value) -> None:
    """Apply ``a.b.c=value`` to a nested config dict (flags override config fields)."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a section")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ConfigError(f"override {dotted!r}: unknown field {keys[-1]!r}")
    cur[keys[-1]] = value


def toy_run_config(**sections) -> RunConfig:
    """Desk-scale defaults: depth-3/base-8 network on 64x96 phantoms."""
    base = RunConfig(
        data=DataConfig(phantom=PhantomConfig.toy()),
        preprocess=PreprocessConfig(target_size=(64, 96)),
        network=NetworkConfig.toy(),
        train=TrainConfig(epochs=30),
    )
    return dataclasses.replace(base, **sections)


