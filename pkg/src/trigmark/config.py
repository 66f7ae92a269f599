"""Run configuration stored as a plain-text INI file.

Each section maps onto one dataclass; unknown keys are rejected. All
component seeds are derived from ``[run] seed`` by name, so the resolved
manifest alone replays a run.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .classifier import TrainConfig
from .de import DEParams, FitnessParams
from .synthetic import SyntheticSpec

FORMAT_VERSION = 1


class ConfigFileError(ValueError):
    pass


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2 ** 63 - 1)


@dataclass
class RunSettings:
    seed: int = 0
    workdir: str = "run"


@dataclass
class DataSettings:
    source: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    num_classes: int = 10
    # share of the test split that forms the owner's trigger pool, and the attacker's share
    trigger_pool_fraction: float = 0.2
    attacker_fraction: float = 0.1


@dataclass
class ModelSettings:
    hidden: str = "128,128"

    def layers(self) -> list[int]:
        return [int(h) for h in self.hidden.split(",") if h.strip()]


@dataclass
class PatternSettings:
    kind: str = "key"
    num_pixels: int = 48
    bits_per_pixel: int = 1
    # empty: a random message drawn from the run seed
    message: str = ""
    zero_value: float = 100.0
    one_value: float = 200.0
    magnitude: float = 100.0
    logo_size: int = 4
    blend_mode: str = "alpha"
    fixed_value: float = 255.0


@dataclass
class TriggerSettings:
    count: int = 40
    label_policy: str = "random-different"
    target: Optional[int] = None
    trigger_fraction: float = 0.05


@dataclass
class VerifySettings:
    n_queries: int = 20
    delta: int = 5
    # empty: max(measured clean-model false positive rate, 1 / num_classes)
    null_rho: Optional[float] = None
    significance: float = 1e-4


@dataclass
class AttackSettings:
    # empty: 20% of embedding epochs at 0.1x the embedding learning rate
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    shift_range: int = 2
    horizontal_flip: bool = False


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: DataSettings = field(default_factory=DataSettings)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40))
    pattern: PatternSettings = field(default_factory=PatternSettings)
    # desk-scale preset; the library defaults (N=50, G=200) suit larger budgets
    de: DEParams = field(default_factory=lambda: DEParams(population_size=20, generations=40))
    fitness: FitnessParams = field(default_factory=FitnessParams)
    triggers: TriggerSettings = field(default_factory=TriggerSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)
    attack: AttackSettings = field(default_factory=AttackSettings)

    def seed_for(self, name: str) -> int:
        return derive_seed(self.run.seed, name)

    def resolve(self) -> "RunConfig":
        """Fill derived seeds and attack defaults, then validate."""
        self.train.rng_seed = self.seed_for("train")
        self.de.rng_seed = self.seed_for("de")
        if self.attack.epochs is None:
            self.attack.epochs = max(1, round(0.2 * self.train.epochs))
        if self.attack.learning_rate is None:
            self.attack.learning_rate = 0.1 * self.train.learning_rate
        self.train.validate()
        self.de.validate()
        self.fitness.validate()
        self.synthetic.validate()
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigFileError(f"data.source must be 'synthetic' or 'idx', got {self.data.source!r}")
        if self.pattern.kind not in ("key", "logo"):
            raise ConfigFileError(f"pattern.kind must be 'key' or 'logo', got {self.pattern.kind!r}")
        if self.verify.n_queries > self.triggers.count:
            raise ConfigFileError("verify.n_queries exceeds triggers.count")
        return self


_SKIP = {("de", "bounds")}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, hint, where: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.strip() == "":
            return None
        hint = args[0]
    try:
        if hint is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigFileError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def to_ini(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["meta"] = {"format_version": str(FORMAT_VERSION)}
    for section in dataclasses.fields(config):
        obj = getattr(config, section.name)
        parser[section.name] = {
            f.name: _format(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if (section.name, f.name) not in _SKIP
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    version = parser.get("meta", "format_version", fallback=str(FORMAT_VERSION))
    if version != str(FORMAT_VERSION):
        raise ConfigFileError(f"unsupported config format_version {version}")
    config = RunConfig()
    sections = {f.name for f in dataclasses.fields(config)}
    for name in parser.sections():
        if name == "meta":
            continue
        if name not in sections:
            raise ConfigFileError(f"unknown config section [{name}]")
        obj = getattr(config, name)
        hints = typing.get_type_hints(type(obj))
        known = {f.name for f in dataclasses.fields(obj)}
        for key, text in parser[name].items():
            if key not in known or (name, key) in _SKIP:
                raise ConfigFileError(f"unknown key {name}.{key}")
            setattr(obj, key, _parse(text, hints[key], f"{name}.{key}"))
    return config


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    return from_ini(path.read_text())
