"""Plain-text INI run configuration.

Sections map one-to-one onto the config dataclasses::

    [net]   NetConfig       [train] TrainConfig (scalar fields)
    [data]  DatasetSpec     [path]  PathSpec     [time]  TimeDist

Missing keys take the dataclass defaults. Unknown sections or keys are errors,
never silently ignored.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .netcore import NetConfig
from .paths import PathSpec, TimeDist
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig
    train: TrainConfig
    data: DatasetSpec

    def to_dict(self) -> dict:
        return {"net": dataclasses.asdict(self.net), "train": self.train.to_dict(), "data": dataclasses.asdict(self.data)}

    def digest(self) -> str:
        """Hash of every setting except the training seed, which names the run separately."""
        d = self.to_dict()
        d["train"].pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.digest()}-s{self.train.seed}"


_NESTED = {"time_dist", "path"}
_SECTIONS = {"net": NetConfig, "train": TrainConfig, "data": DatasetSpec, "path": PathSpec, "time": TimeDist}


def _convert(value: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {value!r} as {type(default).__name__}") from None


def _build(section: str, cls, items: dict):
    defaults = {f.name: f for f in dataclasses.fields(cls) if f.name not in _NESTED}
    kwargs = {}
    for key, raw in items.items():
        if key not in defaults:
            raise ConfigError(f"[{section}] unknown key {key!r}; known keys: {', '.join(sorted(defaults))}")
        f = defaults[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[key] = _convert(raw, default, section, key)
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"[{section}] {err}") from err


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case (L, G, L_min)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; expected {sorted(_SECTIONS)}")
    built = {name: _build(name, cls, dict(parser[name]) if parser.has_section(name) else {}) for name, cls in _SECTIONS.items()}
    train = dataclasses.replace(built["train"], path=built["path"], time_dist=built["time"])
    return RunConfig(net=built["net"], train=train, data=built["data"])


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    d = cfg.to_dict()
    sections = {
        "net": d["net"],
        "train": {k: v for k, v in d["train"].items() if k not in _NESTED},
        "data": d["data"],
        "path": d["train"]["path"],
        "time": d["train"]["time_dist"],
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
