"""JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, replace
from pathlib import Path

from .backbone import BackboneConfig
from .data import TaskSequenceSpec
from .engine import TrainConfig
from .errors import ConfigError, ContractError
from .inference import GradientIdConfig
from .prompts import AttachmentPlan

SEED_ENV = "SOFTTF_SEED"


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 32
    threshold: float = 0.95


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = BackboneConfig()
    pretrain: PretrainConfig = PretrainConfig()
    data: TaskSequenceSpec = TaskSequenceSpec()
    train: TrainConfig = TrainConfig()
    plan: AttachmentPlan = AttachmentPlan()
    gradient_id: GradientIdConfig = GradientIdConfig()
    out_dir: str = "runs/default"
    seed: int = 0

    def resolved(self, seed: int | None = None) -> RunConfig:
        """Propagate the run seed into every seeded section and check cross-section dimensions."""
        seed = self.seed if seed is None else seed
        cfg = replace(self, seed=seed, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))
        b, d = cfg.backbone, cfg.data
        checks = [
            ("backbone.seq_len", b.seq_len, d.n_tokens + 1),
            ("backbone.input_dim", b.input_dim, d.token_dim),
            ("backbone.n_classes_total", b.n_classes_total, d.n_classes_total),
        ]
        for key, got, want in checks:
            if got != want:
                raise ConfigError(f"{key}={got} does not match the data section (expected {want})")
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        for arg in typing.get_args(tp):
            if arg is type(None):
                continue
            try:
                return _convert(arg, value, path)
            except ConfigError:
                continue
        return value
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys with their dotted path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {(path + '.' if path else '') + key!r}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ContractError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(RunConfig, raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def resolve_seed(flag: int | None, cfg: RunConfig) -> int:
    """Seed precedence: command-line flag, then ``SOFTTF_SEED``, then the config."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return cfg.seed

