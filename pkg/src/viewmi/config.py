"""Structured YAML configuration covering every tunable type in the package.

One file configures datasets, encoders, critics, pretraining, augmentation,
flows, view learning, probes, synthesis, and sweeps. Sections map one-to-one
onto the dataclasses they configure; unknown sections or fields are rejected
with the offending path so typos fail loudly (CLI exit code 1).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Any

import yaml

from .datasets import MovingMNISTConfig
from .experiments import (
    FactorStudySettings,
    FrequencySweepSettings,
    PatchSweepSettings,
    ViewLearnStudySettings,
)
from .mi_core import CriticConfig
from .trainer import EncoderSpec, PretrainConfig
from .view_learning import ViewLearnConfig
from .views import AugmentationConfig

__all__ = [
    "ConfigError",
    "FlowSettings",
    "SynthSettings",
    "ProbeCommandSettings",
    "PointSettings",
    "Config",
    "load_config",
    "config_from_dict",
    "EXPERIMENTS",
]


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 1."""


@dataclass(frozen=True)
class FlowSettings:
    mode: str = "VP"
    depth: int = 6
    width: int = 16
    s_max: float = 2.0
    seed: int = 0

    def build(self):
        from .flow_gen import FlowGenerator

        return FlowGenerator(
            mode=self.mode, depth=self.depth, width=self.width, s_max=self.s_max, seed=self.seed
        )


@dataclass(frozen=True)
class SynthSettings:
    samples: int = 64
    chunk_mb: int = 64
    singles: int = 0  # also render this many labeled single images + manifest

    def __post_init__(self):
        if self.samples < 1 or self.chunk_mb < 1 or self.singles < 0:
            raise ValueError("samples and chunk_mb must be positive, singles nonnegative")


@dataclass(frozen=True)
class ProbeCommandSettings:
    encoder_dir: str | None = None  # defaults to the pretrain --out directory
    experiment: str = "frequency"
    param: float = 0.65
    task: str = "classification"

    def __post_init__(self):
        if self.task not in ("classification", "localization"):
            raise ValueError(f"unknown probe task {self.task!r}")


@dataclass(frozen=True)
class PointSettings:
    """Which single experiment point `pretrain` runs."""

    experiment: str = "frequency"
    param: float = 0.65

    def __post_init__(self):
        if self.experiment not in ("frequency", "patch_distance"):
            raise ValueError(
                f"pretrain point supports frequency | patch_distance, got {self.experiment!r}"
            )


EXPERIMENTS: dict[str, type] = {
    "patch_distance": PatchSweepSettings,
    "frequency": FrequencySweepSettings,
    "moving_mnist_factors": FactorStudySettings,
}


def _field_dataclass(f: dataclasses.Field) -> type | None:
    """Nested dataclass type of a field, detected from its default value."""
    if f.default is not dataclasses.MISSING and dataclasses.is_dataclass(f.default):
        return type(f.default)
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        probe = f.default_factory()  # type: ignore[misc]
        if dataclasses.is_dataclass(probe):
            return type(probe)
    return None


def _construct(cls: type, data: dict, path: str):
    """Build a dataclass from a config mapping with strict field checking."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dc_fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(
            f"{path}: unknown field(s) {sorted(unknown)}; valid: {sorted(known)}"
        )
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        nested = _field_dataclass(known[key])
        if nested is not None and isinstance(value, dict):
            value = _construct(nested, value, f"{path}.{key}")
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class Config:
    dataset: MovingMNISTConfig = field(default_factory=MovingMNISTConfig)
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(in_channels=3))
    critic: CriticConfig = field(default_factory=lambda: CriticConfig(head_kind="linear"))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    flow: FlowSettings = field(default_factory=FlowSettings)
    view_learning: ViewLearnConfig = field(default_factory=ViewLearnConfig)
    view_study: ViewLearnStudySettings = field(default_factory=ViewLearnStudySettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    probe: ProbeCommandSettings = field(default_factory=ProbeCommandSettings)
    point: PointSettings = field(default_factory=PointSettings)
    sweep_experiment: str = "frequency"
    sweep_overrides: dict = field(default_factory=dict)
    theory_tables: int = 1000

    def sweep_settings(self, seed_override: int | None = None):
        """Resolve the sweep section into the experiment's settings dataclass."""
        if self.sweep_experiment not in EXPERIMENTS:
            raise ConfigError(
                f"sweep.experiment: unknown experiment {self.sweep_experiment!r}; "
                f"valid: {sorted(EXPERIMENTS)}"
            )
        cls = EXPERIMENTS[self.sweep_experiment]
        settings = _construct(cls, dict(self.sweep_overrides), "sweep")
        if seed_override is not None:
            settings = dataclasses.replace(settings, seeds=(int(seed_override),))
        return settings


_SECTION_TYPES = {
    "dataset": MovingMNISTConfig,
    "encoder": EncoderSpec,
    "critic": CriticConfig,
    "pretrain": PretrainConfig,
    "augment": AugmentationConfig,
    "flow": FlowSettings,
    "view_learning": ViewLearnConfig,
    "view_study": ViewLearnStudySettings,
    "synth": SynthSettings,
    "probe": ProbeCommandSettings,
    "point": PointSettings,
}


def config_from_dict(raw: dict) -> Config:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    valid = set(_SECTION_TYPES) | {"sweep", "theory_tables"}
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}; valid: {sorted(valid)}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTION_TYPES.items():
        if name in raw:
            kwargs[name] = _construct(cls, raw[name], name)
    if "sweep" in raw:
        sweep = raw["sweep"]
        if not isinstance(sweep, dict):
            raise ConfigError("sweep: expected a mapping")
        sweep = dict(sweep)
        kwargs["sweep_experiment"] = sweep.pop("experiment", "frequency")
        kwargs["sweep_overrides"] = sweep
    if "theory_tables" in raw:
        n = raw["theory_tables"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError("theory_tables: expected a positive integer")
        kwargs["theory_tables"] = n
    cfg = Config(**kwargs)
    cfg.sweep_settings()  # fail fast on a bad sweep section
    return cfg


def load_config(path: str | Path | None) -> Config:
    """Load a YAML config; None loads all defaults."""
    if path is None:
        return Config()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
    return config_from_dict(raw)
