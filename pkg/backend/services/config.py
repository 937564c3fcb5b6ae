"""Run configuration: YAML documents parsed into dataclasses.

Layering (later wins): dataclass defaults → ``config/settings.yaml`` → an
optional preset overlay → ``--set key.path=value`` overrides → environment
(``MVDRIVE_OUTPUT_ROOT``). Unknown keys and mistyped values raise
``ConfigError`` carrying the dotted key path.
"""

from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

try:
    import yaml  # type: ignore
except Exception:  # pragma: no cover - optional dependency
    yaml = None  # type: ignore

try:
    from dotenv import load_dotenv  # type: ignore
except Exception:  # pragma: no cover - optional dependency
    load_dotenv = None  # type: ignore

from backend.codec.latent import CodecSpec
from backend.conditions.context import ConditionConfig
from backend.flow.rectified import SamplerConfig
from backend.models.mvdit import ModelConfig
from backend.parallel.buckets import BucketSpec, StagePlan
from backend.scene.synth import SynthSpec
from backend.services.utils import stable_hash

OUTPUT_ROOT_ENV = "MVDRIVE_OUTPUT_ROOT"
PROJECT_ROOT = Path(__file__).resolve().parents[2]


class ConfigError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass
class DataConfig:
    source: str = "synth"
    clips: int = 16
    views: int = 2
    validation_clips: int = 4
    scene_dir: str = ""
    synth: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self) -> None:
        if self.source not in ("synth", "scenes"):
            raise ValueError(f"source must be 'synth' or 'scenes', got '{self.source}'")
        if self.clips < 1 or self.views < 1 or self.validation_clips < 0:
            raise ValueError("clips and views must be >= 1, validation_clips >= 0")


@dataclass
class TrainConfig:
    lr: float = 8e-5
    warmup_steps: int = 3000
    data_parallel: int = 1
    target_iter_seconds: float = 1.0
    min_ratio: float = 0.25
    checkpoint_every: int = 100
    validate_every: int = 10

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.warmup_steps < 0:
            raise ValueError("lr must be > 0 and warmup_steps >= 0")
        if self.data_parallel < 1:
            raise ValueError("data_parallel must be >= 1")
        if self.checkpoint_every < 1 or self.validate_every < 1:
            raise ValueError("checkpoint_every and validate_every must be >= 1")


@dataclass
class SeedConfig:
    model: int = 0
    data: int = 0
    train: int = 0
    validation: int = 1


@dataclass
class FaultConfig:
    flip_window: bool = False


def default_stages() -> List[StagePlan]:
    return [StagePlan(stage=1, buckets=[BucketSpec(32, 56, 17)], steps=200)]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    codec: CodecSpec = field(default_factory=CodecSpec)
    conditions: ConditionConfig = field(default_factory=ConditionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stages: List[StagePlan] = field(default_factory=default_stages)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output_dir: str = "runs"
    fault: FaultConfig = field(default_factory=FaultConfig)


# Parsing


def _suggest(key: str, options: Sequence[str]) -> str:
    try:
        from fuzzywuzzy import process  # type: ignore
    except Exception:  # pragma: no cover - optional dependency
        return ""
    match = process.extractOne(key, list(options))
    if match and match[1] >= 70:
        return f" (did you mean '{match[0]}'?)"
    return ""


def _join(path: str, key: Any) -> str:
    return f"{path}.{key}" if path else str(key)


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is Any:
        return value
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, path)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0] if args else Any, _join(path, i)) for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        item = args[0] if args else Any
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, item, _join(path, i)) for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(path, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, args[i] if args else Any, _join(path, i)) for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        # YAML 1.1 reads exponent forms without a dot ("1e-3") as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(path, f"expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: Any, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(_join(path, key), f"unknown key{_suggest(str(key), names)}")
        kwargs[key] = _coerce(value, hints[key], _join(path, key))
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as error:
        raise ConfigError(path, str(error)) from error


def to_dict(obj: Any) -> Any:
    """Plain YAML-safe structure (tuples become lists)."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    """Deep-merge mappings; lists and scalars in ``overlay`` replace those in ``base``."""
    out = copy.deepcopy(base)
    for key, value in (overlay or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> Dict[str, Any]:
    """``a.b.c=value`` → nested mapping; the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if yaml is not None else raw
    nested: Dict[str, Any] = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return nested


def read_yaml(path: str) -> Dict[str, Any]:
    if yaml is None:
        raise ConfigError(path, "pyyaml is required to read configuration files")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError("", f"{path} must hold a mapping")
    return data


def config_path(*parts: str) -> str:
    return str(PROJECT_ROOT.joinpath("config", *parts))


def preset_path(name: str) -> str:
    path = name if name.endswith((".yaml", ".yml")) else config_path("presets", f"{name}.yaml")
    if not os.path.exists(path):
        available = sorted(p.stem for p in Path(config_path("presets")).glob("*.yaml"))
        raise ConfigError("preset", f"no preset '{name}'{_suggest(name, available)}")
    return path


def load_config(
    settings: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Sequence[str] = (),
    use_env: bool = True,
) -> RunConfig:
    doc: Dict[str, Any] = {}
    settings = settings or config_path("settings.yaml")
    if os.path.exists(settings):
        doc = read_yaml(settings)
    if preset:
        doc = merge(doc, read_yaml(preset_path(preset)))
    for text in overrides:
        doc = merge(doc, parse_override(text))
    if use_env:
        if load_dotenv is not None:
            load_dotenv()
        root = os.getenv(OUTPUT_ROOT_ENV)
        if root:
            doc["output_dir"] = root
    return from_dict(RunConfig, doc)


def dump_config(config: RunConfig) -> str:
    if yaml is None:
        raise ConfigError("", "pyyaml is required to write configuration files")
    return yaml.safe_dump(to_dict(config), sort_keys=False)


def parse_config(text: str) -> RunConfig:
    data = yaml.safe_load(text) if yaml is not None else None
    return from_dict(RunConfig, data or {})


def config_hash(config: RunConfig) -> str:
    return stable_hash(to_dict(config))
