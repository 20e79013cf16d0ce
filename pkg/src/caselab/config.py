"""Run configuration: line-oriented ``section.key = value`` text.

Blank lines and lines starting with ``#`` are ignored. Tuples are written as
comma-separated values. Every key has a default, so an empty file is a valid
configuration; :func:`format_config` writes the fully resolved form back out.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .adapters import CaseConfig
from .backbone import BackboneSpec, StageSpec
from .cost import SyntheticCostTask
from .episodes import SamplerConfig
from .trainer import BaselineConfig, TrainerConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class RunSection:
    seed: int = 0
    adapter: str = "case"
    eval_tasks: int = 600
    pretrain_epochs: int = 6
    pretrain_per_class: int = 40
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 64
    data_root: str = ""


@dataclass
class BackboneSection:
    channels: tuple = (32, 64, 128, 256)
    kernel: int = 3
    stride: int = 2
    adapter_stages: tuple = (0, 1, 2, 3)
    input_channels: int = 3
    input_resolution: int = 32
    activation: str = "silu"

    def spec(self) -> BackboneSpec:
        stages = [StageSpec(int(c), self.kernel, self.stride, i in self.adapter_stages)
                  for i, c in enumerate(self.channels)]
        return BackboneSpec(stages, self.input_channels, self.input_resolution, self.activation)


@dataclass
class BenchmarkSection:
    num_classes: int = 24
    color_jitter: float = 0.25


@dataclass
class AblateSection:
    meta_tasks: int = 64
    eval_tasks: int = 32
    reductions: tuple = (8, 16, 32, 64)
    hidden_layers: tuple = (1, 2, 3, 4)


@dataclass
class FilmSection:
    encoder_channels: tuple = (32, 64)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    case: CaseConfig = field(default_factory=CaseConfig)
    film: FilmSection = field(default_factory=FilmSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    cost: SyntheticCostTask = field(default_factory=SyntheticCostTask)
    ablate: AblateSection = field(default_factory=AblateSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))
        return cfg

    def sampler_config(self) -> SamplerConfig:
        return dataclasses.replace(self.sampler, seed=self.run.seed)

    def trainer_config(self) -> TrainerConfig:
        return dataclasses.replace(self.trainer, seed=self.run.seed)


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text: str, like):
    if like is None:
        return None if text.lower() == "none" else int(text)
    if isinstance(like, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        sample = like[0] if like else 0
        return tuple(_parse_scalar(t, sample) for t in items)
    return _parse_scalar(text, like)


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; errors carry the 1-based line number."""
    values: dict[str, dict[str, tuple[str, int]]] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"key {key!r} has no section prefix", lineno)
        section, name = key.split(".", 1)
        if section not in values:
            raise ConfigError(f"unknown section {section!r}", lineno)
        if name in values[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[section][name] = (value, lineno)

    defaults = RunConfig()
    built = {}
    for section in SECTIONS:
        base = getattr(defaults, section)
        known = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
        kwargs = {}
        for name, (value, lineno) in values[section].items():
            if name not in known:
                raise ConfigError(f"unknown key {section}.{name}", lineno)
            try:
                kwargs[name] = _parse_value(value, known[name])
            except ValueError as e:
                raise ConfigError(f"{section}.{name}: {e}", lineno) from e
        try:
            built[section] = dataclasses.replace(base, **kwargs)
        except (ValueError, TypeError) as e:
            line = min((ln for _, ln in values[section].values()), default=0)
            raise ConfigError(f"invalid [{section}] settings: {e}", line) from e
    cfg = RunConfig(**built)
    try:
        cfg.backbone.spec().spatial_sizes()
    except ValueError as e:
        raise ConfigError(f"invalid backbone: {e}") from e
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Fully resolved configuration text; parsing it yields an equal RunConfig."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
