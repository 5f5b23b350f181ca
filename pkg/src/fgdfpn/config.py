"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

Keys are namespaced ``model.*`` (ModelConfig fields), ``train.*``
(TrainConfig fields) and ``eval.*`` (EvalConfig fields).  Overrides
given on the command line are applied after the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    batch: int = 4
    baseline: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def lines(self) -> list[str]:
        """``key = value`` lines reproducing this configuration."""
        out = []
        for section in ("model", "train", "eval"):
            for f in dataclasses.fields(getattr(self, section)):
                out.append(f"{section}.{f.name} = {_render(getattr(getattr(self, section), f.name))}")
        return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _render(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(t) for t in text.split(","))
    return text


def _parse_line(line: str, where: str) -> tuple[str, str] | None:
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    if "=" not in body:
        raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
    key, value = (s.strip() for s in body.split("=", 1))
    if not key or not value:
        raise ConfigError(f"{where}: empty key or value")
    return key, value


def build(pairs: list[tuple[str, str, str]]) -> RunConfig:
    """Apply ``(key, value, where)`` assignments in order onto the defaults."""
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, text, where in pairs:
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        names = {f.name: f for f in dataclasses.fields(cls)} if cls else {}
        if name not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        f = names[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            values[section][name] = _convert(text, default)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    try:
        return RunConfig(**{s: _SECTIONS[s](**v) for s, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def parse_text(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    pairs = []
    for i, line in enumerate(text.splitlines(), 1):
        kv = _parse_line(line, f"{source}:{i}")
        if kv:
            pairs.append((*kv, f"{source}:{i}"))
    return pairs


def load(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        pairs += parse_text(text, str(path))
    for i, item in enumerate(overrides):
        kv = _parse_line(item, f"override {i + 1}")
        if kv is None:
            raise ConfigError(f"override {i + 1}: empty")
        pairs.append((*kv, f"override {item!r}"))
    return build(pairs)
