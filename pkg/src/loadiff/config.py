"""Run configuration: a YAML file with data/model/train/eval sections.

Every field has a default, so the smallest useful file is::

    data:
      path: load.csv

Precedence, lowest first: built-in defaults, the YAML file, a named preset,
explicit command-line flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attention import DEFAULT_HEADS, MaskSpec
from .data import ColumnSpec
from .denoiser import ModelConfig
from .diffusion import DEFAULT_X0_RANGE, TrainConfig
from .errors import ConfigError
from .layers import STEP_FREQUENCIES


@dataclass
class DataSection:
    path: str | None = None
    timestamp_column: str = "timestamp"
    load_column: str = "load"
    delimiter: str = ","
    timestamp_format: str | None = None
    hour_ending: bool = False
    split_ratio: float = 0.8
    last_days: int | None = None
    # used when no path is given: the built-in synthetic toy series
    synthetic_days: int | None = None
    synthetic_seed: int = 0

    def columns(self):
        return ColumnSpec(self.timestamp_column, self.load_column, self.delimiter,
                          self.timestamp_format, self.hour_ending)


@dataclass
class ModelSection:
    hidden: int = 128
    heads: list = field(default_factory=lambda: list(DEFAULT_HEADS))
    head_dim: int | None = None
    dropout: float = 0.3
    step_dim: int = 64
    step_frequencies: str = "literal"
    cond_layers: int = 2


@dataclass
class TrainSection:
    T: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.5
    lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 60


@dataclass
class EvalSection:
    samples: int = 100
    pinc: list = field(default_factory=lambda: [0.8, 0.9, 0.95])
    x0_range: list | None = field(default_factory=lambda: list(DEFAULT_X0_RANGE))
    kde_grid: int = 512


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    out: str = "runs/default"

    def model_config(self, seq_len=24) -> ModelConfig:
        m = self.model
        return ModelConfig(hidden=m.hidden, seq_len=seq_len, n_steps=self.train.T, heads=tuple(m.heads),
                           head_dim=m.head_dim, dropout=m.dropout, step_dim=m.step_dim,
                           cond_layers=m.cond_layers, seed=self.seed, step_frequencies=m.step_frequencies)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(T=t.T, beta1=t.beta1, betaT=t.betaT, lr=t.lr, batch_size=t.batch_size, epochs=t.epochs)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


PRESETS = {
    "paper": {"train": {"T": 1000, "epochs": 60}, "eval": {"samples": 100}},
    "desk": {"train": {"T": 200, "epochs": 30}, "eval": {"samples": 100}, "data": {"last_days": 730}},
}

_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection, "eval": EvalSection}


def _merge(cfg: RunConfig, raw: dict, origin: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for key, value in raw.items():
        if key in _SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{origin}: section {key!r} must be a mapping")
            section = getattr(cfg, key)
            known = {f.name for f in dataclasses.fields(section)}
            for name, v in value.items():
                if name not in known:
                    raise ConfigError(f"{origin}: unknown field {key}.{name}")
                setattr(section, name, v)
        elif key in ("seed", "out"):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"{origin}: unknown section {key!r}")


def _require(cond, field_name, message):
    if not cond:
        raise ConfigError(f"{field_name}: {message}")


def _as_int(value, field_name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{field_name}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{field_name}: must be >= {minimum}, got {value}")
    return value


def _as_float(value, field_name):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{field_name}: expected a number, got {value!r}")
    return float(value)


def validate(cfg: RunConfig, check_paths=True) -> RunConfig:
    """Type- and range-check every field; errors name the offending field."""
    d, m, t, e = cfg.data, cfg.model, cfg.train, cfg.eval
    cfg.seed = _as_int(cfg.seed, "seed", 0)
    if d.path is None:
        _require(d.synthetic_days is not None or not check_paths, "data.path",
                 "required unless data.synthetic_days is set")
        if d.synthetic_days is not None:
            d.synthetic_days = _as_int(d.synthetic_days, "data.synthetic_days", 7)
    elif check_paths:
        _require(Path(d.path).is_file(), "data.path", f"file not found: {d.path}")
    d.split_ratio = _as_float(d.split_ratio, "data.split_ratio")
    _require(0.0 < d.split_ratio < 1.0, "data.split_ratio", "must lie in (0, 1)")
    if d.last_days is not None:
        d.last_days = _as_int(d.last_days, "data.last_days", 7)
    _require(len(d.delimiter) == 1, "data.delimiter", "must be a single character")

    m.hidden = _as_int(m.hidden, "model.hidden", 1)
    _require(isinstance(m.heads, (list, tuple)) and m.heads, "model.heads", "must be a non-empty list")
    for h in m.heads:
        try:
            MaskSpec.parse(h)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model.heads: bad head {h!r}: {exc}") from None
    if m.head_dim is not None:
        m.head_dim = _as_int(m.head_dim, "model.head_dim", 1)
    m.dropout = _as_float(m.dropout, "model.dropout")
    _require(0.0 <= m.dropout < 1.0, "model.dropout", "must lie in [0, 1)")
    m.step_dim = _as_int(m.step_dim, "model.step_dim", 2)
    _require(m.step_dim % 2 == 0, "model.step_dim", "must be even")
    _require(m.step_frequencies in STEP_FREQUENCIES, "model.step_frequencies",
             f"must be one of {list(STEP_FREQUENCIES)}")
    m.cond_layers = _as_int(m.cond_layers, "model.cond_layers", 1)

    t.T = _as_int(t.T, "train.T", 2)
    t.beta1 = _as_float(t.beta1, "train.beta1")
    t.betaT = _as_float(t.betaT, "train.betaT")
    _require(0.0 < t.beta1 < t.betaT < 1.0, "train.beta1/train.betaT", "need 0 < beta1 < betaT < 1")
    t.lr = _as_float(t.lr, "train.lr")
    _require(t.lr > 0.0, "train.lr", "must be positive")
    t.batch_size = _as_int(t.batch_size, "train.batch_size", 1)
    t.epochs = _as_int(t.epochs, "train.epochs", 1)

    e.samples = _as_int(e.samples, "eval.samples", 2)
    _require(isinstance(e.pinc, (list, tuple)) and e.pinc, "eval.pinc", "must be a non-empty list")
    pincs = []
    for p in e.pinc:
        p = _as_float(p, "eval.pinc")
        if p > 1.0:
            p /= 100.0
        _require(0.0 < p < 1.0, "eval.pinc", f"coverage {p} outside (0, 1)")
        pincs.append(p)
    e.pinc = pincs
    if e.x0_range is not None:
        _require(isinstance(e.x0_range, (list, tuple)) and len(e.x0_range) == 2, "eval.x0_range",
                 "must be [low, high] or null")
        lo, hi = (_as_float(v, "eval.x0_range") for v in e.x0_range)
        _require(lo < hi, "eval.x0_range", "low must be below high")
        e.x0_range = [lo, hi]
    e.kde_grid = _as_int(e.kde_grid, "eval.kde_grid", 8)
    cfg.out = str(cfg.out)
    return cfg


def load_config(path=None, preset=None, seed=None, out=None, pinc=None, check_paths=True) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"--config: file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        _merge(cfg, raw, str(path))
        if cfg.data.path is not None and not Path(cfg.data.path).is_absolute():
            # data paths are relative to the config file
            cfg.data.path = str((path.parent / cfg.data.path).resolve())
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"--preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(cfg, PRESETS[preset], f"preset {preset}")
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    if pinc:
        cfg.eval.pinc = list(pinc)
    return validate(cfg, check_paths)


def config_from_dict(raw: dict, check_paths=True) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, raw, "config")
    return validate(cfg, check_paths)
