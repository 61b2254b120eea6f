"""Command-line entry point: ``scda <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage/config/contract error.
Progress goes to stderr; stdout carries one JSON object per command.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ExperimentConfig, load_config, load_synthetic_spec
from .data import (
    CohortLoadError,
    DataError,
    SchemaError,
    generate_synthetic_cohort,
    load_cohort,
    read_manifest,
    validate_manifest,
)
from .errors import ConfigError, ContractError
from .evaluation import emit_report, roi_importance
from .pipelines import (
    MfeState,
    RunDirectory,
    adapt_target,
    evaluate_predictions,
    init_source_from_pretrain,
    predict_cohort,
    pretrain_unsupervised,
    train_source,
)

log = logging.getLogger("scda.cli")


class UsageError(Exception):
    """Exit with status 2."""


class RuntimeFailure(Exception):
    """Exit with status 1."""


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time, so in-process callers can redirect it."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _setup_logging(verbose: bool) -> None:
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter('ts=%(asctime)s level=%(levelname)s logger=%(name)s msg="%(message)s"'))
    root = logging.getLogger("scda")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    cfg.train_config()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return cfg


def _manifest(cfg: ExperimentConfig, value: str | None, what: str, require_labels: bool = False):
    path = cfg.resolve(value)
    if path is None:
        raise UsageError(f"no {what} manifest configured")
    try:
        manifest = read_manifest(path)
    except OSError as exc:
        raise UsageError(f"cannot read {what} manifest {path}: {exc}") from exc
    report = validate_manifest(manifest)
    if not report.ok:
        raise UsageError(f"{what} manifest invalid: " + "; ".join(report.messages()[:5]))
    if require_labels:
        missing = [e.subject_id for e in manifest.entries if e.label is None]
        if missing:
            raise UsageError(f"{what} manifest has unlabeled subjects: {', '.join(missing[:5])}")
    return manifest


def _run(cfg: ExperimentConfig, args, command: str) -> RunDirectory:
    run = RunDirectory(cfg.run_dir(command, getattr(args, "run_dir", None)))
    run.write_snapshot(cfg.dump())
    return run


def _load_state(path: str, n_rois: int | None = None) -> MfeState:
    try:
        state = MfeState.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise RuntimeFailure(f"cannot load checkpoint {path}: {exc}") from exc
    if n_rois is not None and state.config.n_rois != n_rois:
        raise RuntimeFailure(f"checkpoint/schema mismatch: expected N={n_rois} (manifest), found N={state.config.n_rois}")
    return state


# -- commands -----------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    spec, out_dir = load_synthetic_spec(args.spec)
    out = Path(args.out) if args.out else out_dir
    if out is None:
        raise UsageError("no output directory: pass --out or set out_dir in the synthetic recipe")
    try:
        src, tgt = generate_synthetic_cohort(spec, out)
    except OSError as exc:
        raise RuntimeFailure(str(exc)) from exc
    _emit({"source_manifest": str(src), "target_manifest": str(tgt)})
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    manifest = _manifest(cfg, cfg.paths.auxiliary_manifest, "auxiliary")
    if cfg.train.min_length is not None:
        manifest = manifest.filter_min_length(cfg.train.min_length)
    run = _run(cfg, args, "pretrain")
    state = pretrain_unsupervised(manifest, cfg.train_config(), cfg.graph_config(),
                                  cfg.encoder_config(manifest.roi_count), run=run, resume=args.resume)
    state.save(run.path / "model.npz")
    _emit({"checkpoint": str(run.path / "model.npz"), "epochs": state.epoch})
    return 0


def cmd_train_source(args) -> int:
    cfg = _load_cfg(args)
    manifest = _manifest(cfg, cfg.paths.source_manifest, "source", require_labels=True)
    init = None
    if args.init:
        init = init_source_from_pretrain(_load_state(args.init, manifest.roi_count))
    run = _run(cfg, args, "train-source")
    params = train_source(manifest, init, cfg.train_config(), cfg.graph_config(),
                          encoder=cfg.encoder_config(manifest.roi_count), run=run, resume=args.resume)
    state = MfeState.from_single(params)
    state.save(run.path / "model.npz")
    records = [r for r in run.read_metrics() if r.get("stage") == "source"]
    payload = {"checkpoint": str(run.path / "model.npz")}
    if records and "val" in records[-1]:
        payload["val"] = records[-1]["val"]
    _emit(payload)
    return 0


def cmd_adapt(args) -> int:
    if args.source_manifest:
        raise UsageError("source data forbidden in adaptation")
    cfg = _load_cfg(args)
    manifest = _manifest(cfg, cfg.paths.target_manifest, "target")
    source = _load_state(args.source, manifest.roi_count)
    if source.n_branches != 1:
        raise UsageError("--source must be a single-branch source model checkpoint")
    run = _run(cfg, args, "adapt")
    state = adapt_target(manifest, source.branch_params[0], cfg.train_config(), cfg.graph_config(),
                         run=run, resume=args.resume)
    state.save(run.path / "model.npz")
    _emit({"checkpoint": str(run.path / "model.npz"), "branches": list(state.branch_kinds)})
    return 0


def _eval_inputs(args, cfg):
    manifest_path = args.manifest or cfg.paths.eval_manifest
    if args.manifest:
        manifest_path = str(Path(args.manifest).resolve())
    manifest = _manifest(cfg, manifest_path, "evaluation", require_labels=True)
    state = _load_state(args.checkpoint, manifest.roi_count)
    return manifest, state


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    manifest, state = _eval_inputs(args, cfg)
    series = load_cohort(manifest)
    graph = cfg.graph_config()
    pred = predict_cohort(series, state, graph, stochastic_views=cfg.eval.stochastic_views, seed=cfg.train.seed)
    record = evaluate_predictions(series, pred, cfg.eval.threshold)
    out = Path(args.out) if args.out else cfg.run_dir("evaluate", getattr(args, "run_dir", None)) / "eval"
    emit_report(record, out)
    _emit({"report": str(out / "metrics.json"), **record.as_dict()})
    return 0


def cmd_explain(args) -> int:
    cfg = _load_cfg(args)
    manifest, state = _eval_inputs(args, cfg)
    series = load_cohort(manifest)
    graph = cfg.graph_config()
    k = args.k or cfg.eval.top_k
    pred = predict_cohort(series, state, graph)
    record = evaluate_predictions(series, pred, cfg.eval.threshold)
    try:
        ranking = roi_importance(state, series, k, graph, cfg.eval.threshold)
    except ContractError as exc:
        raise RuntimeFailure(str(exc)) from exc
    out = Path(args.out) if args.out else cfg.run_dir("explain", getattr(args, "run_dir", None)) / "explain"
    emit_report(record, out, ranking)
    _emit({"ranking": str(out / "roi_ranking.tsv"), "top": [roi for roi, _ in ranking]})
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic source/target cohort")
    p.add_argument("spec")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_synth)

    def training(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--run-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--resume", action="store_true")
        p.set_defaults(func=func)
        return p

    training("pretrain", cmd_pretrain, "unsupervised multi-branch pretraining")
    p = training("train-source", cmd_train_source, "supervised source model training")
    p.add_argument("--init", help="pretrained multi-branch checkpoint to average into the initial model")
    p = training("adapt", cmd_adapt, "source-free adaptation on the target cohort")
    p.add_argument("--source", required=True, help="source model checkpoint")
    p.add_argument("--source-manifest", help=argparse.SUPPRESS)

    for name, func, help_ in (("evaluate", cmd_evaluate, "metrics on a labeled manifest"),
                              ("explain", cmd_explain, "ROI importance ranking")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--run-dir")
        p.add_argument("--deterministic", action="store_true")
        if name == "explain":
            p.add_argument("--k", type=int)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError, SchemaError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, FloatingPointError, CohortLoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
