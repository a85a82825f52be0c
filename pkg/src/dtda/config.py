"""Run configuration: nested dataclasses loaded from YAML with strict key checks."""
from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

import yaml

from .daa import AttackConfig
from .datagen import SynthSpec
from .distill import KDConfig
from .errors import ConfigError
from .models import OptimConfig

PROTOCOL_KINDS = ("leave_one_out", "limited_source", "intra")


@dataclass(frozen=True)
class ArchSection:
    widths: tuple = (16, 32, 64)
    norm: str = "batch"


@dataclass(frozen=True)
class ProtocolSection:
    kind: str = "leave_one_out"
    source_domains: tuple = ()       # empty -> derived from kind and target
    target_domain: Optional[int] = None  # None -> every domain in turn
    variant: str = "full"
    seeds: tuple = (0, 1, 2, 3, 4)
    resample_data: bool = True       # seed s also re-draws the synthetic world with seed s
    holdout: float = 0.2             # fraction of source rows held out when pretraining
    intra_train_fraction: float = 0.8


def _student_optim():
    return OptimConfig(lr=0.05, epochs=15, batch_size=32)


def _pretrain_optim():
    return OptimConfig(lr=0.05, epochs=30, batch_size=32)


@dataclass(frozen=True)
class RunConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    arch: ArchSection = field(default_factory=ArchSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    optim: OptimConfig = field(default_factory=_student_optim)
    pretrain: OptimConfig = field(default_factory=_pretrain_optim)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    output_dir: str = "runs"
    seed: int = 0

    def to_dict(self) -> dict:
        return to_dict(self)

    def digest(self) -> str:
        return config_digest(self)


def to_dict(obj) -> dict:
    """JSON-ready dict (tuples become lists)."""
    return json.loads(json.dumps(asdict(obj)))


def config_digest(obj) -> str:
    blob = json.dumps(to_dict(obj) if is_dataclass(obj) else obj, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(tp, value, where, default):
    if value is None:
        if default is None or typing.get_origin(tp) is typing.Union:
            return None
        raise ConfigError(f"{where}: must not be null")
    if typing.get_origin(tp) is typing.Union:
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if is_dataclass(tp):
        return from_dict(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false (got {value!r})")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer (got {value!r})")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number (got {value!r})")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string (got {value!r})")
        return value
    if tp is tuple or typing.get_origin(tp) is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list (got {value!r})")
        for v in value:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where}: expected a list of integers (got {value!r})")
        return tuple(value)
    return value


def from_dict(cls, data, where: str = None):
    """Build dataclass ``cls`` from a mapping; missing keys take defaults."""
    where = where or cls.__name__
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping (got {type(data).__name__})")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.init}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default if f.default is not MISSING else MISSING
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}", default)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, overrides: dict = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides`` (nested dict)."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        data = _merge(data, overrides)
    cfg = from_dict(RunConfig, data, "config")
    if cfg.protocol.kind not in PROTOCOL_KINDS:
        raise ConfigError(f"config.protocol.kind: expected one of {PROTOCOL_KINDS} "
                          f"(got {cfg.protocol.kind!r})")
    return cfg


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Global ``--seed``: seeds both the synthetic world and training."""
    return replace(cfg, seed=seed, data=replace(cfg.data, seed=seed))
