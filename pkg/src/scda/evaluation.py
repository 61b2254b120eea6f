"""Classification metrics, rank AUC, ROI importance and report files."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

METRIC_KEYS = ("auc", "acc", "f1", "sen", "spe", "pre")
REPORT_KEYS = METRIC_KEYS + ("n_pos", "n_neg", "threshold")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0 or self.tp + self.fp + self.tn + self.fn < 1:
            raise ContractError(f"invalid confusion counts {self}")

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], labels: Sequence[int]) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool)
        y = np.asarray(labels, dtype=bool)
        return cls(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y)))


@dataclass(frozen=True)
class MetricsRecord:
    """Six metrics; ``None`` marks a metric that is undefined (0/0)."""

    auc: float | None = None
    acc: float | None = None
    f1: float | None = None
    sen: float | None = None
    spe: float | None = None
    pre: float | None = None
    n_pos: int = 0
    n_neg: int = 0
    threshold: float = 0.5

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def confusion_metrics(counts: ConfusionCounts, threshold: float = 0.5) -> MetricsRecord:
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    return MetricsRecord(
        auc=None,
        acc=_ratio(tp + tn, tp + fp + tn + fn),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        sen=_ratio(tp, tp + fn),
        spe=_ratio(tn, tn + fp),
        pre=_ratio(tp, tp + fp),
        n_pos=tp + fn,
        n_neg=tn + fp,
        threshold=threshold,
    )


def auc_rank(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """Mann-Whitney estimate of P(pos > neg), ties counted as one half."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ContractError("undefined AUC: both classes need at least one score")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks, exact half-integers
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def evaluate_cohort(predictions: Sequence[tuple[str, float, int | None]], threshold: float = 0.5) -> MetricsRecord:
    """Metrics for ``(subject_id, probability, label)`` triples; ``prob >= threshold`` is positive."""
    if not predictions:
        raise ContractError("no predictions to evaluate")
    probs, labels = [], []
    for sid, prob, label in predictions:
        if label not in (0, 1):
            raise ContractError(f"subject {sid} has no binary label")
        if not 0.0 <= prob <= 1.0:
            raise ContractError(f"subject {sid} probability {prob} outside [0, 1]")
        probs.append(float(prob))
        labels.append(int(label))
    probs_arr, labels_arr = np.array(probs), np.array(labels)
    record = confusion_metrics(ConfusionCounts.from_predictions(probs_arr >= threshold, labels_arr), threshold)
    pos, neg = probs_arr[labels_arr == 1], probs_arr[labels_arr == 0]
    auc = auc_rank(pos, neg) if pos.size and neg.size else None
    return MetricsRecord(**{**asdict(record), "auc": auc})


def rank_rois(scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k ROIs as (1-based index, score); ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ContractError("k must be positive")
    order = np.argsort(-scores, kind="stable")[: min(k, scores.size)]
    return [(int(i) + 1, float(scores[i])) for i in order]


# -- reports ------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(record: MetricsRecord) -> str:
    rows = [(k.upper(), _fmt(getattr(record, k))) for k in METRIC_KEYS]
    rows += [("N_POS", str(record.n_pos)), ("N_NEG", str(record.n_neg)), ("THRESHOLD", _fmt(record.threshold))]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {val}" for name, val in rows) + "\n"


def emit_report(record: MetricsRecord, destination: str | os.PathLike,
                roi_ranking: Sequence[tuple[int, float]] | None = None) -> dict[str, Path]:
    """Write ``metrics.json``, ``metrics.txt`` and optionally ``roi_ranking.tsv``.

    Undefined metrics are JSON ``null`` and print as ``n/a``.
    """
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    written = {"metrics": dest / "metrics.json", "table": dest / "metrics.txt"}
    _atomic_write(written["metrics"], json.dumps(record.as_dict(), indent=2) + "\n")
    _atomic_write(written["table"], format_table(record))
    if roi_ranking is not None:
        written["roi_ranking"] = dest / "roi_ranking.tsv"
        _atomic_write(written["roi_ranking"], format_ranking(roi_ranking))
    return written


def format_ranking(ranking: Sequence[tuple[int, float]]) -> str:
    return "".join(f"{r}\t{roi}\t{score:.10g}\n" for r, (roi, score) in enumerate(ranking, 1))


def read_metrics(path: str | os.PathLike) -> MetricsRecord:
    data = json.loads(Path(path).read_text())
    known = {f.name for f in fields(MetricsRecord)}
    return MetricsRecord(**{k: v for k, v in data.items() if k in known})


def read_ranking(path: str | os.PathLike) -> list[tuple[int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        _, roi, score = line.split("\t")
        out.append((int(roi), float(score)))
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def roi_importance(state, cohort, k: int = 10, graph=None, threshold: float = 0.5) -> list[tuple[int, float]]:
    """Rank ROIs by the spatial attention of correctly classified positive subjects.

    Each branch's window-averaged gate is averaged over branches and over the
    selected subjects.  Labels are read here, so this is an evaluation-only
    step, never part of adaptation.
    """
    from .pipelines import GraphConfig, _series, predict_cohort

    series = _series(cohort)
    if any(s.label is None for s in series):
        raise ContractError("roi_importance needs a labeled cohort")
    pred = predict_cohort(series, state, graph or GraphConfig())
    labels = np.array([s.label for s in series])
    hit = (labels == 1) & (pred.probabilities >= threshold)
    if not hit.any():
        raise ContractError("empty selection: no correctly classified positive subjects")
    scores = pred.branch_attention[hit].mean(axis=(0, 1))
    return rank_rois(scores, k)
