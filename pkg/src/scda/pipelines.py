"""Pretraining, source training, source-free adaptation and ensemble inference."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import AuditedCohort, DatasetManifest, RoiTimeseries, load_cohort
from .encoder import (
    EncoderConfig,
    SpatioTemporalEncoder,
    build_encoder,
    encoder_from_params,
    load_checkpoint,
    params_of,
    predict_probability,
    save_checkpoint,
)
from .enrichment import (
    DEFAULT_KEEP_RATIO,
    EnrichmentDomains,
    EnrichmentParams,
    WindowConfig,
    adjacency_sequence,
    neutral_params,
    sample_params,
)
from .errors import ConfigError, ContractError
from .evaluation import MetricsRecord, evaluate_cohort
from .objectives import ConsistencyBatch, average_parameters, bce_loss, mutual_consistency

logger = logging.getLogger(__name__)

BRANCH_KINDS = ("warp", "receptive_field", "slice")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr0: float = 3e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50
    epochs: int = 150
    seed: int = 0
    branch_kinds: tuple[str, ...] = BRANCH_KINDS
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    freeze_norm: bool = False
    ordered_pairs: bool = True
    keep_checkpoints: int = 3

    def __post_init__(self):
        object.__setattr__(self, "branch_kinds", tuple(self.branch_kinds))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be positive")
        if len(set(self.branch_kinds)) != len(self.branch_kinds) or not self.branch_kinds:
            raise ConfigError(f"branch_kinds must be distinct and nonempty, got {self.branch_kinds}")


@dataclass(frozen=True)
class GraphConfig:
    """How a series becomes a graph sequence."""

    window: WindowConfig = WindowConfig()
    keep_ratio: float = DEFAULT_KEEP_RATIO
    absolute: bool = False
    domains: EnrichmentDomains = EnrichmentDomains()

    def adjacency(self, series: RoiTimeseries, params: EnrichmentParams = EnrichmentParams()) -> np.ndarray:
        return adjacency_sequence(series, params, self.window, self.keep_ratio, self.absolute)


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class MfeState:
    """Parameters of every branch plus what is needed to resume."""

    branch_params: list
    branch_kinds: tuple[str, ...]
    rng_state: dict | None = None
    epoch: int = 0

    def __post_init__(self):
        self.branch_kinds = tuple(self.branch_kinds)
        if not self.branch_params or len(self.branch_params) != len(self.branch_kinds):
            raise ContractError("need one parameter set per branch kind")
        shapes = [{k: tuple(v.shape) for k, v in p.items()} for p in self.branch_params]
        if any(s != shapes[0] for s in shapes[1:]):
            raise ContractError("branches do not share an architecture")

    @classmethod
    def from_single(cls, params) -> "MfeState":
        return cls([params], ("none",))

    @property
    def config(self) -> EncoderConfig:
        return EncoderConfig.from_params(self.branch_params[0])

    @property
    def n_branches(self) -> int:
        return len(self.branch_params)

    def branches(self) -> list[SpatioTemporalEncoder]:
        return [encoder_from_params(p) for p in self.branch_params]

    def save(self, path: str | os.PathLike) -> None:
        meta = {"branch_kinds": list(self.branch_kinds), "epoch": self.epoch, "rng_state": self.rng_state}
        save_checkpoint(path, self.branch_params, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MfeState":
        branches, meta = load_checkpoint(path)
        kinds = meta.get("branch_kinds") or ["none"] * len(branches)
        return cls(branches, tuple(kinds), meta.get("rng_state"), int(meta.get("epoch", 0)))


# -- run directories ----------------------------------------------------------


class RunDirectory:
    """``config.snapshot``, ``metrics.log`` (JSON lines) and ``checkpoints/epoch_<k>/``.

    Every file is written to a temporary name and renamed into place.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.checkpoints = self.path / "checkpoints"
        self.checkpoints.mkdir(parents=True, exist_ok=True)

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.log"

    def write_snapshot(self, text: str) -> None:
        _atomic_write(self.path / "config.snapshot", text)

    def read_metrics(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        return [json.loads(ln) for ln in self.metrics_path.read_text().splitlines() if ln.strip()]

    def log_metrics(self, record: dict, stage: str) -> None:
        records = self.read_metrics()
        records.append({"stage": stage, **record})
        _atomic_write(self.metrics_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    def truncate_metrics(self, stage: str, before_epoch: int) -> None:
        kept = [r for r in self.read_metrics() if r.get("stage") != stage or r["epoch"] < before_epoch]
        _atomic_write(self.metrics_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))

    def save_checkpoint(self, epoch: int, state: MfeState, optimizer: torch.optim.Optimizer, keep: int) -> Path:
        final = self.checkpoints / f"epoch_{epoch}"
        tmp = self.checkpoints / f".epoch_{epoch}.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        state.save(tmp / "model.npz")
        torch.save({"optimizer": optimizer.state_dict()}, tmp / "trainer.pt")
        if final.exists():
            shutil.rmtree(final)
        os.rename(tmp, final)
        for old in self.list_checkpoints()[:-keep] if keep > 0 else []:
            shutil.rmtree(self.checkpoints / f"epoch_{old}")
        return final

    def list_checkpoints(self) -> list[int]:
        return sorted(int(p.name.split("_")[1]) for p in self.checkpoints.glob("epoch_*") if p.is_dir())

    def latest(self) -> tuple[MfeState, dict] | None:
        epochs = self.list_checkpoints()
        if not epochs:
            return None
        ckpt = self.checkpoints / f"epoch_{epochs[-1]}"
        trainer = torch.load(ckpt / "trainer.pt", weights_only=True)
        return MfeState.load(ckpt / "model.npz"), trainer["optimizer"]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- cohort helpers -----------------------------------------------------------


def _series(cohort, splits: Sequence[str] | None = None) -> list[RoiTimeseries]:
    if isinstance(cohort, DatasetManifest):
        if splits is not None:
            cohort = cohort.subset(splits)
        return load_cohort(cohort)
    return list(cohort)


def _rng_from_state(state: dict | None, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    # near-equal splits so no batch is a lone subject (batch norm needs > 1 row)
    n_batches = max(1, math.ceil(len(order) / batch_size))
    return [b for b in np.array_split(order, n_batches) if len(b)]


def _set_train_mode(models: Sequence[torch.nn.Module], freeze_norm: bool) -> None:
    for m in models:
        m.train()
        if freeze_norm:
            for mod in m.modules():
                if isinstance(mod, torch.nn.BatchNorm1d):
                    mod.eval()


class ViewCache:
    """Adjacency stacks keyed by (subject index, enrichment parameters)."""

    def __init__(self, series: Sequence[RoiTimeseries], graph: GraphConfig):
        self.series = series
        self.graph = graph
        self._cache: dict = {}

    def get(self, i: int, params: EnrichmentParams) -> np.ndarray:
        key = (i, params)
        adj = self._cache.get(key)
        if adj is None:
            adj = self.graph.adjacency(self.series[i], params)
            self._cache[key] = adj
        return adj


# -- training -----------------------------------------------------------------


@dataclass
class TrainingHistory:
    records: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def _fit(
    models: list[SpatioTemporalEncoder],
    kinds: tuple[str, ...],
    cache: ViewCache,
    cfg: TrainConfig,
    stage: str,
    labels: np.ndarray | None = None,
    validate: Callable[[MfeState], MetricsRecord] | None = None,
    run: RunDirectory | None = None,
    resume: bool = False,
    history: TrainingHistory | None = None,
) -> MfeState:
    """Shared epoch loop; BCE when ``labels`` is given, mutual consistency otherwise."""
    n = len(cache.series)
    rng = np.random.default_rng(cfg.seed)
    params = [p for m in models for p in m.parameters()]
    optimizer = torch.optim.Adam(params, lr=cfg.lr0, betas=cfg.adam_betas, eps=cfg.adam_eps,
                                 weight_decay=cfg.weight_decay)
    start = 0
    if resume and run is not None:
        latest = run.latest()
        if latest is not None:
            state, opt_state = latest
            if state.branch_kinds != kinds:
                raise ConfigError(f"checkpoint branches {state.branch_kinds} do not match {kinds}")
            for m, p in zip(models, state.branch_params):
                m.load_state_dict(p)
            optimizer.load_state_dict(opt_state)
            rng = _rng_from_state(state.rng_state, cfg.seed)
            start = state.epoch
            run.truncate_metrics(stage, start)
            logger.info("resuming %s from epoch %d", stage, start)

    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        _set_train_mode(models, cfg.freeze_norm)
        total = 0.0
        for step, idx in enumerate(_batches(rng.permutation(n), cfg.batch_size)):
            if labels is not None:
                out = models[0]([cache.get(i, EnrichmentParams()) for i in idx])
                loss = bce_loss(out.logits, torch.as_tensor(labels[idx], dtype=out.logits.dtype))
            else:
                outs = []
                for model, kind in zip(models, kinds):
                    views = [cache.get(i, sample_params(kind, cache.series[i].n_timepoints, rng,
                                                        cache.graph.domains)) for i in idx]
                    outs.append(model(views))
                batch = ConsistencyBatch.from_branches([o.features for o in outs], [o.logits for o in outs])
                loss = mutual_consistency(batch, ordered=cfg.ordered_pairs)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"{stage}: non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        state = MfeState([params_of(m) for m in models], kinds, rng.bit_generator.state, epoch + 1)
        record = {"epoch": epoch, "lr": lr, "loss": total / n}
        if validate is not None:
            record["val"] = validate(state).as_dict()
        logger.info("%s epoch %d lr %.3g loss %.6f", stage, epoch, lr, record["loss"])
        if history is not None:
            history.records.append(record)
        if run is not None:
            run.log_metrics(record, stage)
            run.save_checkpoint(epoch + 1, state, optimizer, cfg.keep_checkpoints)

    for m in models:
        m.eval()
    return MfeState([params_of(m) for m in models], kinds, rng.bit_generator.state, max(start, cfg.epochs))


def _branch_seeds(seed: int, m: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(m)]


def pretrain_unsupervised(
    auxiliary,
    cfg: TrainConfig = TrainConfig(),
    graph: GraphConfig = GraphConfig(),
    encoder: EncoderConfig | None = None,
    run: RunDirectory | None = None,
    resume: bool = False,
    history: TrainingHistory | None = None,
) -> MfeState:
    """Independently initialised branches trained on unlabeled data with mutual consistency."""
    series = AuditedCohort(_series(auxiliary))
    if len(series) == 0:
        raise ConfigError("auxiliary cohort is empty")
    encoder = encoder or EncoderConfig(series[0].n_rois)
    models = [build_encoder(encoder, s) for s in _branch_seeds(cfg.seed, len(cfg.branch_kinds))]
    return _fit(models, cfg.branch_kinds, ViewCache(series, graph), cfg, "pretrain",
                run=run, resume=resume, history=history)


def init_source_from_pretrain(state: MfeState):
    return average_parameters(state.branch_params)


def train_source(
    source,
    init=None,
    cfg: TrainConfig = TrainConfig(),
    graph: GraphConfig = GraphConfig(),
    validation=None,
    encoder: EncoderConfig | None = None,
    run: RunDirectory | None = None,
    resume: bool = False,
    history: TrainingHistory | None = None,
):
    """Supervised single-branch training on full-length, unenriched windows.

    ``source`` may be a manifest (its ``source-train`` entries are used and
    ``source-val`` becomes the validation set) or labeled series.
    """
    if isinstance(source, DatasetManifest):
        if validation is None and any(e.split == "source-val" for e in source.entries):
            validation = source.subset(["source-val"])
        train = _series(source, ["source-train"])
    else:
        train = list(source)
    if not train:
        raise ConfigError("source cohort is empty")
    missing = [s.subject_id for s in train if s.label is None]
    if missing:
        raise ConfigError(f"source subjects without labels: {', '.join(missing[:5])}")
    labels = np.array([s.label for s in train], dtype=np.float64)
    if len(set(labels.tolist())) < 2:
        warnings.warn("degenerate cohort: every source label is the same class", stacklevel=2)

    if init is None:
        model = build_encoder(encoder or EncoderConfig(train[0].n_rois), cfg.seed)
    else:
        model = encoder_from_params(init)
    if model.config.n_rois != train[0].n_rois:
        raise ConfigError(f"model expects N={model.config.n_rois}, cohort has N={train[0].n_rois}")

    validate = None
    if validation is not None:
        val_series = _series(validation)
        val_cache = ViewCache(val_series, graph)

        def validate(state: MfeState) -> MetricsRecord:
            return evaluate_predictions(val_series, predict_cohort(val_series, state, graph, cache=val_cache))

    state = _fit([model], ("none",), ViewCache(train, graph), cfg, "source", labels=labels,
                 validate=validate, run=run, resume=resume, history=history)
    return state.branch_params[0]


def adapt_target(
    target,
    source_params,
    cfg: TrainConfig = TrainConfig(),
    graph: GraphConfig = GraphConfig(),
    run: RunDirectory | None = None,
    resume: bool = False,
    history: TrainingHistory | None = None,
) -> MfeState:
    """Source-free adaptation: copies of the source model fine-tuned for branch agreement.

    Only unlabeled target series are touched.  Pass an :class:`AuditedCohort` to
    keep an access log; manifests and plain sequences are wrapped in one.
    """
    if isinstance(target, AuditedCohort):
        cohort = target
    elif isinstance(target, DatasetManifest):
        cohort = AuditedCohort.from_manifest(target)
    else:
        cohort = AuditedCohort(list(target))
    if len(cohort) == 0:
        raise ConfigError("target cohort is empty")
    models = [encoder_from_params(copy.deepcopy(source_params)) for _ in cfg.branch_kinds]
    return _fit(models, cfg.branch_kinds, ViewCache(cohort, graph), cfg, "adapt",
                run=run, resume=resume, history=history)


# -- inference ----------------------------------------------------------------


@dataclass
class CohortPrediction:
    subject_ids: list[str]
    probabilities: np.ndarray  # (n,) ensemble mean
    branch_logits: np.ndarray  # (n, m)
    branch_attention: np.ndarray  # (n, m, N)


def predict_cohort(
    cohort,
    state: MfeState,
    graph: GraphConfig = GraphConfig(),
    batch_size: int = 64,
    cache: ViewCache | None = None,
    stochastic_views: int = 0,
    seed: int = 0,
) -> CohortPrediction:
    """Branch-averaged probabilities for every subject.

    By default each branch sees its neutral view (no warp, base window, full
    series).  ``stochastic_views > 0`` instead averages that many sampled views
    per branch.
    """
    series = _series(cohort)
    if not series:
        raise ContractError("nothing to predict")
    cache = cache or ViewCache(series, graph)
    models = state.branches()
    n, m = len(series), len(models)
    logits = np.zeros((n, m))
    probs = np.zeros((n, m))
    attention = np.zeros((n, m, state.config.n_rois))
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for b, (model, kind) in enumerate(zip(models, state.branch_kinds)):
            model.eval()
            n_views = max(1, stochastic_views)
            for v in range(n_views):
                for idx in _batches(np.arange(n), batch_size):
                    if stochastic_views:
                        views = [cache.get(i, sample_params(kind, series[i].n_timepoints, rng, graph.domains))
                                 for i in idx]
                    else:
                        views = [cache.get(i, neutral_params(kind, graph.window)) for i in idx]
                    out = model(views)
                    lg = out.logits.numpy()
                    logits[idx, b] += lg / n_views
                    probs[idx, b] += predict_probability(lg) / n_views
                    attention[idx, b] += out.attention.numpy() / n_views
    return CohortPrediction([s.subject_id for s in series], probs.mean(axis=1), logits, attention)


def ensemble_predict(subject: RoiTimeseries, state: MfeState, graph: GraphConfig = GraphConfig()) -> float:
    return float(predict_cohort([subject], state, graph).probabilities[0])


def evaluate_predictions(series: Sequence[RoiTimeseries], pred: CohortPrediction, threshold: float = 0.5):
    triples = [(s.subject_id, float(p), s.label) for s, p in zip(series, pred.probabilities)]
    return evaluate_cohort(triples, threshold)
