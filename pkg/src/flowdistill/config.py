"""Experiment configuration: typed dataclasses, TOML load/save, env overrides.

Every scalar of the pipeline lives here.  Files are plain TOML with one
section per component; unknown keys are rejected by name so that a typo in
an experiment record never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .ccd import CcdConfig
from .dist_align import DaConfig
from .flow_core import DatasetSpec, TeacherConfig, TimestepSampler
from .traj_align import TaConfig

VERSION = "1"
ENV_PREFIX = "FLOWDISTILL_"


class ConfigError(ValueError):
    pass


@dataclass
class NetSection:
    width: int = 64
    blocks: int = 2


@dataclass
class EvalConfig:
    steps_list: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    n_eval: int = 2000
    ref_steps: int = 1024
    defect_t1: float = 0.3
    defect_t2: float = 0.9
    steps: int = 4


@dataclass
class ExperimentConfig:
    version: str = VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    train_size: int = 20000
    deploy: str = "theta"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    net: NetSection = field(default_factory=NetSection)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    ccd: CcdConfig = field(default_factory=lambda: CcdConfig(lr=5e-6))
    da: DaConfig = field(default_factory=lambda: DaConfig(lambda_adv=0.1, disc_lr=2e-3))
    ta: TaConfig = field(default_factory=lambda: TaConfig(lr=1e-5))
    ta_rounds: list[list[int]] = field(default_factory=lambda: [[8, 4], [4, 2]])
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.version != VERSION:
            raise ConfigError(f"config version {self.version!r} does not match tool version {VERSION!r}")
        if self.deploy not in ("theta", "ema"):
            raise ConfigError(f"deploy must be 'theta' or 'ema', got {self.deploy!r}")
        if self.train_size < 1:
            raise ConfigError(f"train_size must be positive, got {self.train_size}")
        if not self.ta_rounds or any(len(r) != 2 for r in self.ta_rounds):
            raise ConfigError(f"ta_rounds must be a list of [steps_w, steps_l] pairs, got {self.ta_rounds}")
        steps = self.eval.steps_list
        if not steps or steps != sorted(steps) or steps[0] < 1:
            raise ConfigError(f"eval.steps_list must be ascending positive integers, got {steps}")
        try:
            self.dataset.validate()
            self.ccd.validate()
            self.da.validate()
            for w, l in self.ta_rounds:
                self.ta_round(w, l).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def ta_round(self, steps_w: int, steps_l: int) -> TaConfig:
        return dataclasses.replace(self.ta, steps_w=steps_w, steps_l=steps_l)


# ---------------------------------------------------------------------------
# dict <-> dataclass


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table, got {type(value).__name__}")
        return _build(tp, value, key + ".")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(v, args[0], key) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(prefix + k for k in unknown))
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else v
    return out


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# TOML text


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot write value {v!r} as TOML")


def dumps(cfg: ExperimentConfig) -> str:
    """TOML text for ``cfg``; ``None`` values are omitted and load back as defaults."""
    lines: list[str] = []
    tables: list[tuple[str, dict]] = []

    def emit(d: dict, name: str):
        scalars = {k: v for k, v in d.items() if not isinstance(v, dict)}
        if name:
            lines.append(f"\n[{name}]")
        for k, v in scalars.items():
            if v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
        for k, v in d.items():
            if isinstance(v, dict):
                tables.append((f"{name}.{k}" if name else k, v))

    emit(to_dict(cfg), "")
    while tables:
        name, d = tables.pop(0)
        emit(d, name)
    return "\n".join(lines).lstrip("\n") + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from e
    return from_dict(data)


def load(path: str | os.PathLike, env: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    apply_env(data, os.environ if env is None else env)
    return from_dict(data)


def save(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps(cfg))


def _parse_env_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_env(data: dict, env) -> dict:
    """Apply ``FLOWDISTILL_SECTION__KEY=value`` overrides in place.

    Section and key names are lower-cased; ``__`` separates nesting levels.
    Values are parsed as TOML literals, falling back to a bare string.
    """
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name}: {part} is not a section")
        node[path[-1]] = _parse_env_value(env[name])
    return data


def schema(obj=None, prefix: str = "") -> list[str]:
    """One line per key: dotted name, type and default."""
    obj = ExperimentConfig() if obj is None else obj
    out = []
    hints = _hints(type(obj))
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.extend(schema(v, prefix + f.name + "."))
        else:
            shown = "unset" if v is None else _toml_value(v)
            out.append(f"{prefix}{f.name}: {_type_name(hints[f.name])} = {shown}")
    return out


def _type_name(tp) -> str:
    if isinstance(tp, type) and not typing.get_args(tp):
        return tp.__name__
    return str(tp).replace("typing.", "")


__all__ = [
    "VERSION",
    "ENV_PREFIX",
    "ConfigError",
    "NetSection",
    "EvalConfig",
    "ExperimentConfig",
    "TimestepSampler",
    "to_dict",
    "from_dict",
    "dumps",
    "loads",
    "load",
    "save",
    "apply_env",
    "schema",
]
