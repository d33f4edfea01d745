"""Run configuration: INI-style sections of ``key = value`` pairs mapped onto dataclasses."""

from __future__ import annotations

import ast
import configparser
import os
from dataclasses import dataclass, field, fields, replace

from .env import RewardWeights
from .evalkit import MetricWeights
from .flywheel import PRESETS, FlywheelConfig
from .learner import PpoConfig
from .miner import tracker_config
from .sim import SimParams

RUN_DIR_ENV = "DXTK_RUN_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    run_dir: str = "runs/default"
    library: str = ""  # empty: generate a library from the flywheel settings


@dataclass(frozen=True)
class RunConfig:
    sim: SimParams = field(default_factory=SimParams)
    reward: RewardWeights = field(default_factory=RewardWeights)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    tracker: PpoConfig = field(default_factory=tracker_config)
    flywheel: FlywheelConfig = field(default_factory=FlywheelConfig)
    eval: MetricWeights = field(default_factory=MetricWeights)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def seed(self) -> int:
        return self.flywheel.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, flywheel=replace(self.flywheel, seed=int(seed)))


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _parse_value(text: str, default, key: str):
    text = text.strip()
    if isinstance(default, str):
        return text
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected True or False, got {text!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {text!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {text!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a list, got {text!r}")
        return tuple(value)
    return value


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, str):
        return v
    return repr(v)


def from_parser(cp: configparser.ConfigParser, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    updates = {}
    for sec in SECTIONS:
        current = getattr(base, sec)
        if not cp.has_section(sec):
            continue
        names = {f.name for f in fields(current)}
        kw = {}
        for key, text in cp.items(sec):
            if key not in names:
                raise ConfigError(f"unknown key [{sec}] {key}")
            kw[key] = _parse_value(text, getattr(current, key), f"[{sec}] {key}")
        try:
            updates[sec] = replace(current, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}]: {exc}") from exc
    return replace(base, **updates)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return from_parser(cp, base)


def load(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_text(fh.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def to_text(cfg: RunConfig) -> str:
    """Snapshot listing every value, in a form ``parse_text`` reads back to an equal config."""
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        part = getattr(cfg, sec)
        for f in fields(part):
            out.append(f"{f.name} = {_format_value(getattr(part, f.name))}")
        out.append("")
    return "\n".join(out)


def with_preset(cfg: RunConfig, preset: str) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return replace(cfg, flywheel=PRESETS[preset](seed=cfg.flywheel.seed))


def apply_env(cfg: RunConfig) -> RunConfig:
    run_dir = os.environ.get(RUN_DIR_ENV)
    if run_dir:
        cfg = replace(cfg, paths=replace(cfg.paths, run_dir=run_dir))
    return cfg
