"""Run configuration: one merged view over the model, loss, training,
post-processing and world settings, read from ``[section]`` / ``key = value``
files and overridable key by key."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Tuple

from .losses import LossConfig
from .model import ModelConfig
from .synth import Dynamics, WorldConfig
from .tracker import PostprocConfig
from .train import TrainConfig

SEED_ENV = "SFPP_SEED"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class RunSettings:
    seed: int = 0                # model init and pair sampling
    world_seed: int = 7          # training world
    test_seed: int = 1234        # held-out world
    train_sequences: int = 60
    test_sequences: int = 20
    sequence_length: int = 60
    jobs: int = 1
    grad_instances: int = 20


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    dynamics: Dynamics = field(default_factory=Dynamics)

    def resolved(self) -> "RunConfig":
        """Copy with the cross-section links applied (world dynamics, training
        seed, world length).  Sections themselves stay the source of truth."""
        out = dataclasses.replace(self)
        out.world = dataclasses.replace(self.world, dynamics=dataclasses.replace(self.dynamics),
                                        length=self.run.sequence_length,
                                        template_size=self.model.template_size,
                                        search_size=self.model.search_size)
        out.train = dataclasses.replace(self.train, seed=self.run.seed)
        return out

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.postproc.validate()
        r = self.run
        if r.train_sequences < 1 or r.test_sequences < 1 or r.jobs < 1:
            raise ConfigError("run counts must be >= 1")
        if r.sequence_length < 2:
            raise ConfigError("sequence_length must be >= 2")


# keys that are not user-settable because another section drives them
_HIDDEN = {("train", "seed"), ("world", "dynamics"), ("world", "length"),
           ("world", "template_size"), ("world", "search_size")}


def sections(cfg: RunConfig) -> Dict[str, Any]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def keys(cfg: RunConfig) -> List[Tuple[str, str, Any]]:
    """Every settable (section, key, current value), in declaration order."""
    out = []
    for sec, obj in sections(cfg).items():
        for f in fields(obj):
            if (sec, f.name) not in _HIDDEN:
                out.append((sec, f.name, getattr(obj, f.name)))
    return out


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def parse_value(text: str, like: Any, where: str, line: int = 0) -> Any:
    t = text.strip()
    try:
        if isinstance(like, bool):
            low = t.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(t)
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
        if isinstance(like, list):
            items = [s.strip() for s in t.split(",") if s.strip()]
            if like and isinstance(like[0], int) and not isinstance(like[0], bool):
                return [int(s) for s in items]
            if like and isinstance(like[0], float):
                return [float(s) for s in items]
            return items
        return t
    except ValueError:
        raise ConfigError(f"bad value {t!r} for {where}", line) from None


def set_key(cfg: RunConfig, section: str, key: str, text: str, line: int = 0) -> None:
    secs = sections(cfg)
    if section not in secs:
        raise ConfigError(f"unknown section [{section}]", line)
    obj = secs[section]
    names = {f.name for f in fields(obj)}
    if key not in names or (section, key) in _HIDDEN:
        raise ConfigError(f"unknown key {key!r} in [{section}]", line)
    setattr(obj, key, parse_value(text, getattr(obj, key), f"{section}.{key}", line))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in sections(cfg):
                raise ConfigError(f"unknown section [{section}]", no)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        if section is None:
            raise ConfigError("key outside of any [section]", no)
        key, _, value = line.partition("=")
        set_key(cfg, section, key.strip(), value, no)
    return cfg


def load_config(path: str | None, overrides: Dict[str, str] | None = None,
                env: Dict[str, str] | None = None) -> RunConfig:
    """File (if any), then ``section.key`` overrides, then ``SFPP_SEED``."""
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        set_key(cfg, sec, key, value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        set_key(cfg, "run", "seed", env[SEED_ENV])
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Config text that parses back to the same values."""
    lines = []
    current = None
    for sec, key, val in keys(cfg):
        if sec != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{sec}]")
            current = sec
        lines.append(f"{key} = {format_value(val)}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, directory: str, name: str = "resolved_config.ini") -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    return path


def config_json(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))
