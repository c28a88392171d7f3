"""
Immutable run configuration.

Values resolve in layers: dataclass defaults, then a sectioned ``key = value``
file, then ``BCLIP_<SECTION>_<KEY>`` environment variables, then
``--section.key value`` flags. Every layer is validated by the section
dataclass it feeds, so error messages always name ``section.key``.
"""

from __future__ import annotations

import datetime as dt
import platform
import re
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Type

from hier_align.decompose import Level
from hier_align.evaluation import EvalConfig
from hier_align.model import ModelConfig
from hier_align.toyworld import WorldConfig
from hier_align.train import CHECKPOINT_NAME, TrainConfig

ENV_PREFIX = "BCLIP_"

_SECTION_RE = re.compile(r"^\[\s*([A-Za-z_]+)\s*\]$")
_KEY_RE = re.compile(r"^[a-z_][a-z0-9_]*$")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

Layer = Dict[str, Dict[str, str]]


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    progress: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**63:
            raise ValueError(f"run.seed={self.seed} must be a non-negative 63-bit integer.")


@dataclass(frozen=True)
class PathsSection:
    data_dir: Path = Path("data")
    run_dir: Path = Path("runs/latest")
    checkpoint: str = ""  # empty means <run_dir>/checkpoint.bclp
    out_dir: str = ""  # empty means run_dir

    @property
    def train_file(self) -> Path:
        return self.data_dir / "train.jsonl"

    @property
    def val_file(self) -> Path:
        return self.data_dir / "val.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint).expanduser() if self.checkpoint else self.run_dir / CHECKPOINT_NAME

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir).expanduser() if self.out_dir else self.run_dir


SECTIONS: Dict[str, Type[Any]] = {
    "run": RunSection,
    "paths": PathsSection,
    "world": WorldConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# the training seed always comes from [run]
_HIDDEN_KEYS = {("train", "seed")}

_TUPLE_ITEMS: Dict[Tuple[str, str], Type[Any]] = {
    ("train", "negative_levels"): Level,
    ("eval", "ks"): int,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.train.seed != self.run.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.run.seed))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run": {"seed": self.run.seed, "progress": self.run.progress},
            "paths": {
                "data_dir": str(self.paths.data_dir),
                "run_dir": str(self.paths.run_dir),
                "checkpoint": str(self.paths.checkpoint_path),
                "out_dir": str(self.paths.output_dir),
            },
            "world": self.world.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }


def run_meta() -> Dict[str, Any]:
    """Timestamps and host details. Kept apart from the config echo so reruns diff cleanly."""
    return {
        "created": dt.datetime.now(dt.timezone.utc).isoformat(),
        "host": platform.node(),
        "python": platform.python_version(),
    }


def _unquote(value: str) -> str:
    if len(value) >= 2 and (
        (value.startswith('"') and value.endswith('"'))
        or (value.startswith("'") and value.endswith("'"))
    ):
        return value[1:-1]
    return value


def read_config_file(path: Path) -> Layer:
    """
    Read ``key = value`` entries grouped under ``[section]`` headers.
    """
    if not path.exists() or not path.is_file():
        raise OSError(f"config file {path} does not exist")

    values: Layer = {}
    section: Optional[str] = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = _SECTION_RE.match(line)
        if header is not None:
            section = header.group(1).lower()
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}.")
        key_raw, value_raw = line.split("=", 1)
        key = key_raw.strip().lower()
        if section is None:
            raise ValueError(f"{path}:{lineno}: {key!r} appears before any [section] header.")
        values[section][key] = _unquote(value_raw.strip())
    return values


def env_overrides(env: Mapping[str, str]) -> Layer:
    values: Layer = {}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX) :].lower().partition("_")
        if not key:
            raise ValueError(f"environment variable {name} must look like {ENV_PREFIX}<SECTION>_<KEY>.")
        values.setdefault(section, {})[key] = value
    return values


def parse_overrides(tokens: Sequence[str]) -> Layer:
    """``--section.key value`` or ``--section.key=value`` pairs into a layer."""
    values: Layer = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            raise ValueError(f"unrecognized argument {token!r}; expected --section.key value.")
        name = token[2:]
        if "=" in name:
            name, value = name.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ValueError(f"--{name} needs a value.")
            value = tokens[i + 1]
            i += 2
        section, _, key = name.partition(".")
        values.setdefault(section.lower(), {})[key.lower().replace("-", "_")] = value
    return values


def merge_layers(*layers: Layer) -> Layer:
    merged: Layer = {}
    for layer in layers:
        for section, entries in layer.items():
            merged.setdefault(section, {}).update(entries)
    return merged


def _parse_bool(where: str, raw: str) -> bool:
    text = raw.strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"{where}={raw!r} must be a boolean (true/false).")


def _coerce(section: str, key: str, default: Any, raw: str) -> Any:
    where = f"{section}.{key}"
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(where, text)
        if isinstance(default, Enum):
            enum_type = type(default)
            try:
                return enum_type(text.lower())
            except ValueError:
                choices = ", ".join(m.value for m in enum_type)
                raise ValueError(f"{where}={raw!r} must be one of: {choices}.") from None
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, Path):
            return Path(text).expanduser()
        if isinstance(default, tuple):
            item_type = _TUPLE_ITEMS[(section, key)]
            items = [s.strip() for s in text.split(",") if s.strip()]
            if item_type is Level:
                return tuple(Level(s.lower()) for s in items)
            return tuple(item_type(s) for s in items)
    except ValueError as exc:
        if str(exc).startswith(where):
            raise
        raise ValueError(f"{where}={raw!r} is not a valid value ({exc}).") from exc
    return text


def build_section(section: str, entries: Mapping[str, str]) -> Any:
    cls = SECTIONS.get(section)
    if cls is None:
        raise ValueError(f"unknown config section [{section}]; expected one of: {', '.join(SECTIONS)}.")
    defaults = cls()
    allowed = {f.name for f in fields(cls) if (section, f.name) not in _HIDDEN_KEYS}
    kwargs: Dict[str, Any] = {}
    for key, raw in entries.items():
        if not _KEY_RE.fullmatch(key) or key not in allowed:
            raise ValueError(f"unknown config key {section}.{key}.")
        kwargs[key] = _coerce(section, key, getattr(defaults, key), raw)
    return cls(**kwargs)


def resolve_config(
    config_file: Optional[Path] = None,
    env: Optional[Mapping[str, str]] = None,
    flags: Optional[Layer] = None,
) -> RunConfig:
    layers: List[Layer] = []
    if config_file is not None:
        layers.append(read_config_file(config_file))
    layers.append(env_overrides(env or {}))
    layers.append(flags or {})
    merged = merge_layers(*layers)
    for section in merged:
        if section not in SECTIONS:
            raise ValueError(
                f"unknown config section [{section}]; expected one of: {', '.join(SECTIONS)}."
            )
    return RunConfig(**{name: build_section(name, merged.get(name, {})) for name in SECTIONS})
