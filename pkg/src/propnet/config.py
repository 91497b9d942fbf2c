"""Run configuration: strict JSON parsing, dotted overrides, fingerprints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import ConfigError, PhantomConfig
from .model import NetworkConfig
from .propagate import PropagationConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    n_train: int = 40
    n_val: int = 10
    target_spacing: float = 0.6
    normalize_mode: str = "paper"

    def __post_init__(self):
        if self.normalize_mode not in ("paper", "clip"):
            raise ValueError("normalize_mode must be 'paper' or 'clip'")
        if self.target_spacing <= 0:
            raise ValueError("target_spacing must be > 0")


@dataclass
class EvaluateConfig:
    tolerances: tuple[float, ...] = (0.5, 1.0, 2.0)


@dataclass
class RunConfig:
    seed: int = 7
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    propagate: PropagationConfig = field(default_factory=PropagationConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def __post_init__(self):
        if self.model.input_size != self.propagate.crop_size:
            raise ValueError(
                f"model.input_size ({self.model.input_size}) must equal propagate.crop_size "
                f"({self.propagate.crop_size})")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigError as exc:
                errors.append(exc)
        raise ConfigError(f"{key}: expected {_type_name(tp)}, got {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected object for section {tp.__name__}, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in section '{prefix}'" if prefix else ""
        raise ConfigError(f"unknown key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(value, hints[name], key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = path.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def parse_config(path: str | Path | None = None, overrides: list[str] | tuple = (),
                 env: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus ``section.key=value``
    overrides (values parsed as JSON, falling back to plain strings).

    Unknown keys and type mismatches raise ConfigError naming the key.
    ``PROPNET_SEED`` in ``env`` (default: os.environ) replaces the seed.
    """
    data: dict = {}
    if path is not None:
        text = Path(path).read_text().strip()
        if text:
            data = json.loads(text)
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        data = _merge(data, _parse_override(item))
    env = os.environ if env is None else env
    if env.get("PROPNET_SEED"):
        try:
            data["seed"] = int(env["PROPNET_SEED"])
        except ValueError as exc:
            raise ConfigError(f"PROPNET_SEED must be an int, got {env['PROPNET_SEED']!r}") from exc
    return _build(RunConfig, data)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def schema() -> dict:
    """JSON-schema style description of every section, key, type and default."""

    def describe(cls):
        hints = typing.get_type_hints(cls)
        props = {}
        default = cls()
        for f in dataclasses.fields(cls):
            tp = hints[f.name]
            if dataclasses.is_dataclass(tp):
                props[f.name] = describe(tp)
            else:
                props[f.name] = {"type": _type_name(tp), "default": _plain(getattr(default, f.name))}
        return {"type": "object", "additionalProperties": False, "properties": props}

    return describe(RunConfig)
