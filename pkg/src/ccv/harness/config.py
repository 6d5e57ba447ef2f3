"""Experiment configuration in a minimal ``key = value`` text format.

Grammar (one item per line)::

    # comment              ignored, as are blank lines
    [section]              starts a section
    key = value            value is the rest of the line, stripped

Keys before the first section header belong to the unnamed section "".
Duplicate keys: the last one wins. Values are strings; typing happens when
building an :class:`ExperimentConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from ..cycle import CcvConfig

Sections = dict


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> Sections:
    sections: Sections = {}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"line {lineno}: malformed section header {raw!r}")
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        sections.setdefault(current, {})[key] = value.strip()
    return sections


def serialize_config(sections: Sections) -> str:
    lines = []
    for name, items in sections.items():
        if name:
            if lines:
                lines.append("")
            lines.append(f"[{name}]")
        for key, value in items.items():
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _convert(value: str, typ, where: str):
    try:
        if typ is bool or typ == "bool":
            low = value.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(value)
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ}") from None
    return value


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fill(cls, items: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in items.items():
        if key not in known or key == "ccv":
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[key] = _convert(value, known[key].type, f"{where}.{key}")
    return kwargs


@dataclass
class ExperimentConfig:
    checkpoint: str = "checkpoint.ccvw"
    dataset: str = "data"
    output: str = "results"
    context_selection: str = "random"
    context_size: int = 8
    shift_kind: str = "gamma"
    shift_magnitude: float = 0.5
    seed: int = 0
    max_queries_per_task: int = 0
    ccv: CcvConfig = field(default_factory=CcvConfig)

    def validate(self) -> "ExperimentConfig":
        if self.context_selection not in ("random", "knn"):
            raise ConfigError(f"context_selection must be 'random' or 'knn', got {self.context_selection!r}")
        if self.context_size < 1:
            raise ConfigError(f"context_size must be >= 1, got {self.context_size}")
        if self.shift_magnitude < 0:
            raise ConfigError(f"shift_magnitude must be >= 0, got {self.shift_magnitude}")
        try:
            self.ccv.validate()
        except ValueError as exc:
            raise ConfigError(f"ccv: {exc}") from None
        return self

    @classmethod
    def from_sections(cls, sections: Sections) -> "ExperimentConfig":
        for name in sections:
            if name not in ("experiment", "ccv"):
                raise ConfigError(f"unknown section [{name}]" if name else "keys outside any section")
        exp = _fill(cls, sections.get("experiment", {}), "experiment")
        ccv = CcvConfig(**_fill(CcvConfig, sections.get("ccv", {}), "ccv"))
        return cls(ccv=ccv, **exp).validate()

    def to_sections(self) -> Sections:
        exp = {f.name: _format(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "ccv"}
        ccv = {f.name: _format(getattr(self.ccv, f.name)) for f in dataclasses.fields(self.ccv)}
        return {"experiment": exp, "ccv": ccv}

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls.from_sections(parse_config(Path(path).read_text()))

    def dump(self) -> str:
        return serialize_config(self.to_sections())
