"""Run configuration: JSON documents with defaults for every field.

Schema (all keys optional, unknown keys are an error)::

    {
      "seed": 0,
      "synth": {"mode": "features" | "raster", "n_slides": 100, "dim": 30,
                "d_prime": 2.0, "sigma": 1.0, "n_tiles_min": 30, "n_tiles_max": 90,
                "w0": 0.1759, "noise": true, "split": [0.7, 0.1, 0.2],
                "width": 2048, "height": 2048, "tile_size": 512, "overlap": 128},
      "train": {"method": "weseg", "lr": 0.001, "slides_per_batch": 8,
                "tiles_per_slide": 30, "patience": 50, "max_epochs": 200,
                "hidden": [64, 32], "record_wall_time": false,
                "margins": {"r_low": 0, "r_high": 0, "a_low": 0, "a_high": 0}},
      "sweep": {"trials": 8},
      "methods": ["weseg", "alphabeta:50:0", "alphabeta:50:50", "alphabeta:75:0",
                  "attention_mil", "supervised"]
    }

``WESEG_SEED`` in the environment overrides the file's seed; command-line
flags override both.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .core import Margins
from .synth import NORMAL_FRACTION, SynthSpec
from .train import Method, TrainConfig

SEED_ENV = "WESEG_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    mode: str = "features"
    n_slides: int = 100
    dim: int = 30
    d_prime: float = 2.0
    sigma: float = 1.0
    n_tiles_min: int = 30
    n_tiles_max: int = 90
    w0: float = NORMAL_FRACTION
    noise: bool = True
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    width: int = 2048
    height: int = 2048
    tile_size: int = 512
    overlap: int = 128


@dataclass
class MarginsSection:
    r_low: float = 0.0
    r_high: float = 0.0
    a_low: float = 0.0
    a_high: float = 0.0


@dataclass
class TrainSection:
    method: str = "weseg"
    lr: float = 1e-3
    slides_per_batch: int = 8
    tiles_per_slide: int = 30
    patience: int = 50
    max_epochs: int = 200
    hidden: list = field(default_factory=lambda: [64, 32])
    record_wall_time: bool = False
    margins: MarginsSection = field(default_factory=MarginsSection)


@dataclass
class SweepSection:
    trials: int = 8


DEFAULT_METHODS = ["weseg", "alphabeta:50:0", "alphabeta:50:50", "alphabeta:75:0",
                   "attention_mil", "supervised"]


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    methods: list = field(default_factory=lambda: list(DEFAULT_METHODS))

    def validate(self):
        s = self.synth
        if s.mode not in ("features", "raster"):
            raise ConfigError(f"synth.mode must be 'features' or 'raster', not {s.mode!r}")
        if len(s.split) != 3 or any(x < 0 for x in s.split) or abs(sum(s.split) - 1) > 1e-9:
            raise ConfigError("synth.split must be three non-negative fractions summing to 1")
        try:
            for m in [self.train.method, *self.methods]:
                Method.parse(m)
            self.synth_spec()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.sweep.trials < 1:
            raise ConfigError("sweep.trials must be >= 1")
        return self

    def synth_spec(self) -> SynthSpec:
        s = self.synth
        return SynthSpec(dim=s.dim, d_prime=s.d_prime, sigma=s.sigma,
                         n_tiles=(s.n_tiles_min, s.n_tiles_max), w0=s.w0, seed=self.seed)

    def train_config(self, method=None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            method=Method.parse(method or t.method), lr=t.lr,
            slides_per_batch=t.slides_per_batch, tiles_per_slide=t.tiles_per_slide,
            patience=t.patience, max_epochs=t.max_epochs,
            margins=Margins(**dataclasses.asdict(t.margins)),
            hidden=tuple(t.hidden), seed=self.seed, record_wall_time=t.record_wall_time,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


_SECTIONS = {"synth": SynthSection, "train": TrainSection, "sweep": SweepSection}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if cls is RunConfig and name in _SECTIONS:
            value = _build(_SECTIONS[name], value, name)
        elif cls is TrainSection and name == "margins":
            value = _build(MarginsSection, value, "train.margins")
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load(path=None, seed=None) -> RunConfig:
    """Config from ``path`` (defaults when ``None``), then env and explicit seed overrides."""
    data = {}
    if path:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(data)
    if os.environ.get(SEED_ENV):
        cfg.seed = int(os.environ[SEED_ENV])
    if seed is not None:
        cfg.seed = seed
    return cfg


def write(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(cfg.dumps())
