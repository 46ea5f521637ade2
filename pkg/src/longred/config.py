"""Run configuration files and seeded random substreams.

Config files are TOML restricted to known sections and keys::

    seed = 0
    output_dir = "runs/abf"

    [model]
    n_layers = 4
    ...

    [extension]
    kind = "abf"
    new_base = 5e5
    target_window = 256

Unknown sections or keys are errors, so a typo cannot silently fall back
to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import ModelConfig
from .positions import SkipConfig
from .rope import ExtensionSpec
from .trainer import TrainPlan

SUBSTREAMS = {"init": 0, "batch": 1, "sampler": 2, "probe": 3, "data": 4}


class ConfigError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of randomness."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), SUBSTREAMS[name]]))


@dataclass
class DataConfig:
    d1: str = ""
    d2: str = ""
    d3: str = ""
    init_checkpoint: str = ""
    probe_size: int = 8


@dataclass
class RunConfig:
    model: ModelConfig | None = None
    extension: ExtensionSpec | None = None
    train: TrainPlan = field(default_factory=TrainPlan)
    skip: SkipConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "run"
    metrics_every: int = 1

    def validate(self) -> None:
        t = self.train
        if self.extension is not None and self.skip is not None:
            if self.skip.T_l != self.extension.target_window:
                raise ConfigError("skip.T_l must equal extension.target_window")
        if self.skip is not None:
            if self.skip.T != t.orig_len or self.skip.T_l != t.long_len:
                raise ConfigError("skip.T / skip.T_l must match train.orig_len / train.long_len")
        if self.model is not None and self.extension is not None:
            if self.extension.target_window != t.long_len:
                raise ConfigError("train.long_len must equal extension.target_window")
            if self.model.context_window != t.orig_len:
                raise ConfigError("train.orig_len must equal model.context_window")
        if t.distill_layers is not None and self.model is not None:
            L = self.model.n_layers
            if any(not 0 <= l <= L for l in t.distill_layers) or L not in t.distill_layers:
                raise ConfigError("distill_layers must lie in [0, L] and contain L")
            if len(t.distill_layers) != t.n_distill_layers:
                raise ConfigError("len(distill_layers) must equal n_distill_layers")


_SECTIONS = {
    "model": ModelConfig,
    "extension": ExtensionSpec,
    "train": TrainPlan,
    "skip": SkipConfig,
    "data": DataConfig,
}
_TOP = {"seed", "output_dir", "metrics_every"}


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    vals = dict(values)
    for k in ("mix_ratio", "distill_layers"):
        if k in vals and vals[k] is not None:
            vals[k] = tuple(vals[k])
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    cfg = RunConfig()
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"unknown section [{key}]")
            setattr(cfg, key, _build(_SECTIONS[key], value, key))
        elif key in _TOP:
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())
