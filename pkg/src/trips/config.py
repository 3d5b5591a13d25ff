"""Experiment configuration: a sectioned TOML document with dotted-path overrides."""

import dataclasses
from dataclasses import dataclass, field

import tomli
import tomli_w

from .errors import ConfigError
from .losses import LossConfig
from .prototypes import DriftConfig
from .stream import SyntheticConfig
from .trainer import TrainConfig


@dataclass
class ScenarioSection:
    n_steps: int = 2
    classes_per_step: int = 2
    test_domains: list = field(default_factory=list)
    data: str = ""
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class TrainSection:
    lr: float = 1.25e-2
    max_iters: int = 500
    per_domain_batch: int = 8
    optimizer: str = "adam"
    val_period: int = 50
    hidden: list = field(default_factory=lambda: [64, 64])
    feature_dim: int = 32
    activation: str = "relu"
    batch_norm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    head_init_std: float = 0.01
    val_ratio: float = 0.8
    replace_when_short: bool = True


@dataclass
class EvalSection:
    protocol: str = "end_of_step"
    micro: bool = False

    def __post_init__(self):
        if self.protocol not in ("end_of_step", "subtask"):
            raise ValueError(f"unknown protocol {self.protocol!r}")


@dataclass
class OutputSection:
    dir: str = "runs/trips"
    checkpoints: bool = True
    curves: bool = True
    workers: int = 0


SECTIONS = {
    "scenario": ScenarioSection,
    "synthetic": SyntheticConfig,
    "train": TrainSection,
    "losses": LossConfig,
    "drift": DriftConfig,
    "eval": EvalSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainSection = field(default_factory=TrainSection)
    losses: LossConfig = field(default_factory=LossConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self):
        return tomli_w.dumps(self.to_dict())

    def train_config(self, seed):
        t = dataclasses.asdict(self.train)
        t["hidden"] = tuple(t["hidden"])
        return TrainConfig(seed=seed, losses=self.losses, drift=self.drift, **t)


def _coerce(section, key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
    elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    elif isinstance(default, (int, float, str, list)) and not isinstance(value, type(default)):
        raise ConfigError(f"{section}.{key} must be of type {type(default).__name__}")
    return value


def from_dict(doc):
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        values = dict(doc.get(name, {}))
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        extra = set(values) - set(defaults)
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
        for key, value in values.items():
            values[key] = _coerce(name, key, value, defaults[key])
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return ExperimentConfig(**built)


def loads(text):
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None


def parse_value(raw):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_overrides(doc, overrides):
    """Apply ``section.key=value`` strings; values are parsed as TOML literals."""
    for item in overrides:
        path, sep, raw = item.partition("=")
        section, dot, key = path.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        doc.setdefault(section, {})[key] = parse_value(raw.strip())
    return doc


def load_config(path=None, overrides=()):
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = loads(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return from_dict(apply_overrides(doc, overrides))
