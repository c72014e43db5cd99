"""Strict INI experiment configuration with per-key provenance.

Every key lives in a section (``[task]``, ``[loss]``, ...). Values are
resolved in layers, each recorded as the key's provenance:
``default`` < ``preset`` (scenario) < ``file`` < ``override`` (``--set``).
Unknown sections or keys are rejected, never ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .tasks import Task
from .trainer import CollapseThresholds, TrainConfig


class ConfigError(ValueError):
    """Bad configuration input; the message names the offending key path."""


class _OptionalFloat(float):
    """Marker type: a float that may be left unset (``auto``)."""


_KIND = {"learning_rate": _OptionalFloat}


# section -> key -> (type, default)
def _schema() -> dict:
    task, loss, train, col = Task(), LossConfig(), TrainConfig(), CollapseThresholds()
    pick = lambda obj, names: {n: (_KIND.get(n, type(getattr(obj, n))), getattr(obj, n))  # noqa: E731
                               for n in names}
    return {
        "run": {
            "seeds": (list, [0, 1, 2]),
            "verbosity": (int, 1),
        },
        "task": pick(task, ["kind", "f_bonus", "max_operand", "n_symbols", "min_items", "max_items",
                            "max_response_len"]),
        "policy": pick(train, ["n_ctx", "n_pos", "init_scale", "temperature"]),
        "loss": pick(loss, [f.name for f in dataclasses.fields(LossConfig)]),
        "train": pick(train, ["batch_size", "k", "episodes", "steps_per_episode", "minibatches",
                              "optimizer", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
                              "eval_every", "eval_prompts"]),
        "collapse": pick(col, [f.name for f in dataclasses.fields(CollapseThresholds)]),
    }


SCHEMA = _schema()


def _key_index() -> dict:
    index: dict = {}
    for section, keys in SCHEMA.items():
        for key in keys:
            index.setdefault(key, []).append(section)
    return index


_BARE_KEYS = _key_index()


def resolve_key(name: str) -> tuple[str, str]:
    """Map ``section.key`` or a bare, unambiguous ``key`` to ``(section, key)``."""
    if "." in name:
        section, key = name.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r} in key {name!r}; sections: {sorted(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {name!r}; [{section}] accepts {sorted(SCHEMA[section])}")
        return section, key
    sections = _BARE_KEYS.get(name)
    if not sections:
        raise ConfigError(f"unknown key {name!r}")
    if len(sections) > 1:
        raise ConfigError(f"key {name!r} is ambiguous; qualify it as one of "
                          f"{[s + '.' + name for s in sections]}")
    return sections[0], name


def parse_value(section: str, key: str, raw) -> object:
    kind, _ = SCHEMA[section][key]
    path = f"{section}.{key}"
    if kind is _OptionalFloat:
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("auto", "none", "")):
            return None
        kind = float
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if kind is list and isinstance(raw, (list, tuple)):
            return [int(x) for x in raw]
        if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
            return raw
        raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is list:
            return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"{path}: expected {kind.__name__}, got {raw!r}") from None
    return text


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) and value > 0 else repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    """Fully-resolved settings plus where each value came from."""

    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})
    provenance: dict = field(default_factory=lambda: {s: {k: "default" for k in keys}
                                                      for s, keys in SCHEMA.items()})
    scenario: str | None = None
    out: str | None = None

    def get(self, name: str):
        s, k = resolve_key(name)
        return self.values[s][k]

    def set(self, name: str, value, source: str) -> None:
        s, k = resolve_key(name)
        self.values[s][k] = parse_value(s, k, value)
        self.provenance[s][k] = source

    def apply(self, settings: dict, source: str) -> "ExperimentConfig":
        for name, value in settings.items():
            self.set(name, value, source)
        return self

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig(
            {s: {k: (list(v) if isinstance(v, list) else v) for k, v in kv.items()}
             for s, kv in self.values.items()},
            {s: dict(kv) for s, kv in self.provenance.items()},
            self.scenario, self.out,
        )

    @property
    def seeds(self) -> list[int]:
        return list(self.values["run"]["seeds"])

    def train_config(self, seed: int) -> TrainConfig:
        v = self.values
        try:
            task = Task(**v["task"])
            loss = LossConfig(**v["loss"])
            collapse = CollapseThresholds(**v["collapse"])
            return TrainConfig(task=task, loss=loss, collapse=collapse, seed=int(seed),
                               **v["policy"], **v["train"])
        except ValueError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def to_ini(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {format_value(val)}" for k, val in kv.items())
            lines.append("")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "values": {s: {k: format_value(val) for k, val in kv.items()} for s, kv in self.values.items()},
            "provenance": self.provenance,
        }


def read_ini(text: str, origin: str = "<string>") -> dict:
    """Parse INI text into ``{"section.key": raw_string}``, rejecting unknown names."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so misspellings are not silently normalized
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: malformed config: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]; sections: {sorted(SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            out[f"{section}.{key}"] = raw
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        s, k = resolve_key(key.strip())
        out[f"{s}.{k}"] = value.strip()
    return out


def parse_config(path=None, overrides=(), preset: dict | None = None, seeds=None) -> ExperimentConfig:
    """Resolve defaults, then ``preset``, then the file at ``path``, then ``overrides``."""
    cfg = ExperimentConfig()
    if preset:
        cfg.apply(preset, "preset")
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.apply(read_ini(p.read_text(), str(p)), "file")
    cfg.apply(parse_overrides(overrides), "override")
    if seeds is not None:
        cfg.set("run.seeds", seeds, "override")
    if not cfg.seeds:
        raise ConfigError("run.seeds: at least one seed is required")
    return cfg
