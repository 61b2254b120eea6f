"""Experiment configuration files (YAML) with full-length defaults."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import DomainShift, SyntheticSpec
from .encoder import EncoderConfig
from .enrichment import DEFAULT_ALPHAS, DEFAULT_BETAS, DEFAULT_GAMMAS, EnrichmentDomains, WindowConfig
from .errors import ConfigError
from .pipelines import GraphConfig, TrainConfig

RUN_ROOT_ENV = "SCDA_RUN_ROOT"


@dataclass
class Paths:
    source_manifest: str | None = None
    target_manifest: str | None = None
    auxiliary_manifest: str | None = None
    eval_manifest: str | None = None
    run_dir: str | None = None


@dataclass
class WindowSection:
    length: int = 40
    stride: int = 30


@dataclass
class GraphSection:
    keep_ratio: float = 0.3
    absolute: bool = False


@dataclass
class EnrichmentSection:
    alphas: list = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    betas: list = field(default_factory=lambda: list(DEFAULT_BETAS))
    gammas: list = field(default_factory=lambda: list(DEFAULT_GAMMAS))


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    norm: bool = True


@dataclass
class TrainSection:
    batch_size: int = 64
    lr0: float = 3e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50
    epochs: int = 150
    seed: int = 0
    branch_kinds: list = field(default_factory=lambda: ["warp", "receptive_field", "slice"])
    weight_decay: float = 0.0
    freeze_norm: bool = False
    ordered_pairs: bool = True
    keep_checkpoints: int = 3
    min_length: int | None = None


@dataclass
class EvalSection:
    threshold: float = 0.5
    top_k: int = 10
    stochastic_views: int = 0


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    window: WindowSection = field(default_factory=WindowSection)
    graph: GraphSection = field(default_factory=GraphSection)
    enrichment: EnrichmentSection = field(default_factory=EnrichmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    deterministic: bool = True
    base_dir: Path = field(default=Path("."), repr=False)

    # -- derived objects ------------------------------------------------------

    def graph_config(self) -> GraphConfig:
        try:
            return GraphConfig(
                WindowConfig(self.window.length, self.window.stride),
                self.graph.keep_ratio,
                self.graph.absolute,
                EnrichmentDomains(self.enrichment.alphas, self.enrichment.betas, self.enrichment.gammas),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size, lr0=t.lr0, lr_decay_factor=t.lr_decay_factor,
            lr_decay_every=t.lr_decay_every, epochs=t.epochs, seed=t.seed,
            branch_kinds=tuple(t.branch_kinds), weight_decay=t.weight_decay, freeze_norm=t.freeze_norm,
            ordered_pairs=t.ordered_pairs, keep_checkpoints=t.keep_checkpoints,
        )

    def encoder_config(self, n_rois: int) -> EncoderConfig:
        return EncoderConfig(n_rois, self.model.hidden, self.model.layers, self.model.norm)

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(os.path.expandvars(os.path.expanduser(value)))
        return p if p.is_absolute() else self.base_dir / p

    def run_dir(self, command: str, override: str | None = None) -> Path:
        if override:
            return Path(override)
        if self.paths.run_dir:
            return self.resolve(self.paths.run_dir)
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        return root / command

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("base_dir")
        return data

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _coerce(value: Any, default: Any, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or key.endswith(("min_length",)):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _fill(obj, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(obj) if f.name != "base_dir"}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key '{full}'")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _fill(current, value, full + ".")
        else:
            setattr(obj, key, _coerce(value, current, full))
    return obj


def parse_config(data: dict | None, base_dir: Path = Path(".")) -> ExperimentConfig:
    cfg = _fill(ExperimentConfig(), data or {}, "")
    cfg.base_dir = base_dir
    cfg.graph_config()
    try:
        cfg.train_config()
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(data, path.parent)


SYNTH_KEYS = {f.name for f in dataclasses.fields(SyntheticSpec)} | {"out_dir"}
SHIFT_KEYS = {f.name for f in dataclasses.fields(DomainShift)}


def load_synthetic_spec(path: str | os.PathLike) -> tuple[SyntheticSpec, Path | None]:
    """Parse a synthetic-cohort recipe; returns the spec and its optional ``out_dir``."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (yaml.YAMLError, OSError) as exc:
        raise ConfigError(f"cannot parse synthetic spec {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for key in data:
        if key not in SYNTH_KEYS:
            raise ConfigError(f"unknown synthetic spec key '{key}'")
    shift = data.get("domain_shift", {}) or {}
    if not isinstance(shift, dict):
        raise ConfigError("domain_shift: expected a mapping")
    for key in shift:
        if key not in SHIFT_KEYS:
            raise ConfigError(f"unknown synthetic spec key 'domain_shift.{key}'")
    out_dir = data.pop("out_dir", None)
    defaults = SyntheticSpec()
    kwargs = {}
    for key, value in data.items():
        if key == "domain_shift":
            try:
                kwargs[key] = DomainShift(**{k: float(v) for k, v in shift.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"domain_shift: {exc}") from exc
            continue
        default = getattr(defaults, key)
        if key == "planted_block":
            if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                raise ConfigError("planted_block: expected a list of integers")
            kwargs[key] = tuple(value)
        elif key == "target_subjects_per_class":
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(value, default, key)
    try:
        spec = SyntheticSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec, (path.parent / out_dir if out_dir and not Path(out_dir).is_absolute() else
                  Path(out_dir) if out_dir else None)
