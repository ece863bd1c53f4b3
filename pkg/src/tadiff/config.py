"""Run configuration: one nested dataclass per module, stored as flat dotted JSON keys.

Defaults reproduce the published hyper-parameters where they exist
(T=600, T_m=10, five samplings, lambda=0.01, k_l=11, filter 0.1, lr 2.5e-4,
1000 warm-up steps, accumulation 2) at desk scale for the rest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .denoiser import DenoiserConfig
from .errors import ConfigError
from .losses import LossConfig
from .sampler import SamplerConfig
from .schedule import ScheduleConfig
from .trainer import TrainConfig

# dataclass field name -> config key, where they differ
_ALIASES = {("loss", "lam"): "lambda"}


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        self.schedule.validate()
        self.sampler.validate(self.schedule.T)
        self.loss.validate()
        self.train.validate()
        self.model.validate()
        self.data.validate()


def _section_fields(section: str):
    cls = type(getattr(RunConfig(), section))
    return {_ALIASES.get((section, f.name), f.name): f.name for f in fields(cls)}


def _to_json(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, dict):
        return {str(k): v for k, v in value.items()}
    return value


def _from_json(section: str, name: str, value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{name}", f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{section}.{name}", f"expected an object, got {value!r}")
        try:
            return {int(k): float(v) for k, v in value.items()}
        except ValueError:
            raise ConfigError(f"{section}.{name}", "keys must be integer treatment codes") from None
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{section}.{name}", f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{section}.{name}", f"expected a number, got {value!r}")
        return float(value)
    return value


def to_flat(cfg: RunConfig) -> dict:
    out = {}
    for sec in fields(RunConfig):
        sub = getattr(cfg, sec.name)
        for key, attr in _section_fields(sec.name).items():
            out[f"{sec.name}.{key}"] = _to_json(getattr(sub, attr))
    return out


def from_flat(flat: dict, base: RunConfig | None = None) -> RunConfig:
    """Apply dotted keys on top of ``base`` (defaults); unknown keys are rejected."""
    cfg = base or RunConfig()
    updates: dict[str, dict] = {}
    for dotted, value in flat.items():
        section, _, key = dotted.partition(".")
        if section not in {f.name for f in fields(RunConfig)} or not key:
            raise ConfigError(dotted, "unknown configuration key")
        names = _section_fields(section)
        if key not in names:
            raise ConfigError(dotted, "unknown configuration key")
        attr = names[key]
        default = getattr(getattr(cfg, section), attr)
        updates.setdefault(section, {})[attr] = _from_json(section, key, value, default)
    for section, kv in updates.items():
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **kv)})
    cfg.validate()
    return cfg


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a JSON value (bare strings allowed)."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(text, "override must look like key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError(str(path), "config file must hold a JSON object")
    flat.update(overrides or {})
    return from_flat(flat)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_flat(cfg), indent=2, sort_keys=True) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
