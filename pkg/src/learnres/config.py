"""Declarative experiment configuration (YAML) with strict validation."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .losses import LossWeights
from .predictor import PredictorConfig
from .scale import PRESETS, ScaleConfig
from .simulator import OracleConfig, SizeDistribution, TrainConfig
from .verify import CheckConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 2000
    seed: int = 0
    file: str = "dataset.jsonl"
    size: SizeDistribution = SizeDistribution()

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs/default"
    preset: str | None = "M"
    scale: ScaleConfig = ScaleConfig()
    data: DataConfig = DataConfig()
    predictor: PredictorConfig = PredictorConfig()
    oracle: OracleConfig = OracleConfig()
    train: TrainConfig = TrainConfig()
    check: CheckConfig = CheckConfig()

    @property
    def dataset_path(self) -> Path:
        p = Path(self.data.file)
        return p if p.is_absolute() else Path(self.out_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor"]["hidden_dims"] = list(self.predictor.hidden_dims)
        d["data"]["size"]["long_side_range"] = list(self.data.size.long_side_range)
        return d


_NESTED = {
    (ExperimentConfig, "scale"): ScaleConfig,
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "predictor"): PredictorConfig,
    (ExperimentConfig, "oracle"): OracleConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "check"): CheckConfig,
    (DataConfig, "size"): SizeDistribution,
    (TrainConfig, "lambdas"): LossWeights,
}


def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return float(value) if isinstance(default, float) else value


def _build(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, sub)
        elif value is None:
            kwargs[name] = None
        else:
            kwargs[name] = _check_type(sub, value, getattr(defaults, name))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    cfg = _build(ExperimentConfig, raw, "")
    scale_raw = raw.get("scale") or {}
    return resolve_preset(cfg, cfg.preset, explicit_scale="tau_max" in scale_raw)


def resolve_preset(cfg: ExperimentConfig, preset: str | None, explicit_scale: bool = False) -> ExperimentConfig:
    """Apply a tau_max preset (S/M/B/L/H) unless tau values were given explicitly."""
    if preset is None or explicit_scale:
        return dataclasses.replace(cfg, preset=None if explicit_scale else preset)
    if preset.upper() not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    try:
        scale = ScaleConfig(cfg.scale.tau_min, PRESETS[preset.upper()])
    except ValueError as exc:
        raise ConfigError(f"scale: {exc}") from None
    return dataclasses.replace(cfg, preset=preset.upper(), scale=scale)


def load(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return from_dict(raw or {})


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Override every seed in the config with ``seed``."""
    r = dataclasses.replace
    return r(cfg, data=r(cfg.data, seed=seed), predictor=r(cfg.predictor, init_seed=seed),
             oracle=r(cfg.oracle, seed=seed), train=r(cfg.train, seed=seed), check=r(cfg.check, seed=seed))
