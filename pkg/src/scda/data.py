"""Subject/cohort data model, on-disk formats and the synthetic two-domain cohort.

Matrix files are delimited text::

    #roi_timeseries v1 L=<L> N=<N>
    <N whitespace-separated values per row, L rows>

Manifests are small text files with ``key: value`` header lines followed by one
tab-separated record per subject: ``subject_id  path  label|-  split``.  Paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MATRIX_MAGIC = "#roi_timeseries v1"
MANIFEST_MAGIC = "#scda_manifest v1"
SCHEMA_VERSION = 1
SPLITS = ("source-train", "source-val", "target", "auxiliary")
LABELED_SPLITS = ("source-train", "source-val")


class DataError(ValueError):
    """Malformed matrix content (non-finite values, bad shape)."""


class SchemaError(ValueError):
    """Cohort-level inconsistency such as an ROI count mismatch."""


class CohortLoadError(OSError):
    """A referenced subject file could not be read."""


@dataclass(frozen=True, eq=False)
class RoiTimeseries:
    """One subject's ROI signals, ``values`` has shape (L, N)."""

    subject_id: str
    values: np.ndarray
    label: int | None = None
    constant_columns: tuple[int, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"{self.subject_id}: expected a 2-D matrix, got shape {values.shape}")
        if values.shape[0] < 2 or values.shape[1] < 2:
            raise DataError(f"{self.subject_id}: need L >= 2 and N >= 2, got {values.shape}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"{self.subject_id}: non-finite value at ({r}, {c})")
        if self.label not in (None, 0, 1):
            raise DataError(f"{self.subject_id}: label must be 0, 1 or absent, got {self.label!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[0]

    @property
    def n_rois(self) -> int:
        return self.values.shape[1]

    @property
    def flagged(self) -> bool:
        return bool(self.constant_columns)

    def with_values(self, values: np.ndarray) -> "RoiTimeseries":
        return RoiTimeseries(self.subject_id, values, self.label, self.constant_columns)

    def without_label(self) -> "RoiTimeseries":
        return RoiTimeseries(self.subject_id, self.values, None, self.constant_columns)


def zscore_columns(values: np.ndarray, atol: float = 1e-12) -> tuple[np.ndarray, tuple[int, ...]]:
    """Per-column z-score; constant columns become zero and are reported."""
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean(axis=0)
    std = np.sqrt((centered**2).mean(axis=0))
    scale = np.maximum(np.abs(values).max(axis=0), 1.0)
    constant = std <= atol * scale
    out = np.zeros_like(centered)
    live = ~constant
    out[:, live] = centered[:, live] / std[live]
    return out, tuple(int(i) for i in np.flatnonzero(constant))


def normalize(series: RoiTimeseries) -> RoiTimeseries:
    values, constant = zscore_columns(series.values)
    flags = tuple(sorted(set(series.constant_columns) | set(constant)))
    return RoiTimeseries(series.subject_id, values, series.label, flags)


# -- matrix files -------------------------------------------------------------


def write_matrix(path: str | os.PathLike, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    L, N = values.shape
    lines = [f"{MATRIX_MAGIC} L={L} N={N}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in values)
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_matrix(path: str | os.PathLike, subject_id: str | None = None) -> np.ndarray:
    path = Path(path)
    who = subject_id or path.name
    try:
        text = path.read_text()
    except OSError as exc:
        raise CohortLoadError(f"cannot read matrix for subject {who}: {exc}") from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MATRIX_MAGIC):
        raise DataError(f"{who}: missing '{MATRIX_MAGIC}' header")
    header = dict(tok.split("=", 1) for tok in lines[0][len(MATRIX_MAGIC):].split())
    try:
        L, N = int(header["L"]), int(header["N"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{who}: bad header {lines[0]!r}") from exc
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != L:
        raise DataError(f"{who}: header says L={L} but found {len(rows)} rows")
    out = np.empty((L, N))
    for r, ln in enumerate(rows):
        toks = ln.split()
        if len(toks) != N:
            raise DataError(f"{who}: row {r} has {len(toks)} columns, expected {N}")
        for c, tok in enumerate(toks):
            try:
                v = float(tok)
            except ValueError as exc:
                raise DataError(f"{who}: unparsable value {tok!r} at ({r}, {c})") from exc
            if not math.isfinite(v):
                raise DataError(f"{who}: non-finite value at ({r}, {c})")
            out[r, c] = v
    return out


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    path: str
    label: int | None
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    roi_count: int
    schema_version: int = SCHEMA_VERSION
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def subset(self, splits: Iterable[str]) -> "DatasetManifest":
        keep = set(splits)
        return DatasetManifest(
            tuple(e for e in self.entries if e.split in keep), self.roi_count, self.schema_version, self.root
        )

    def filter_min_length(self, min_length: int) -> "DatasetManifest":
        """Keep subjects with more than ``min_length`` time points (reads headers only)."""
        keep = []
        for e in self.entries:
            with open(self.resolve(e)) as fh:
                header = fh.readline()
            L = int(header.split("L=")[1].split()[0])
            if L > min_length:
                keep.append(e)
        return DatasetManifest(tuple(keep), self.roi_count, self.schema_version, self.root)

    def __len__(self):
        return len(self.entries)


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    lines = [MANIFEST_MAGIC, f"schema_version: {manifest.schema_version}", f"roi_count: {manifest.roi_count}"]
    for e in manifest.entries:
        label = "-" if e.label is None else str(e.label)
        lines.append("\t".join((e.subject_id, e.path, label, e.split)))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    header: dict[str, str] = {}
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" in line:
            parts = line.split("\t")
            if len(parts) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            sid, rel, label, split = parts
            if label == "-":
                lab = None
            elif label in ("0", "1"):
                lab = int(label)
            else:
                raise SchemaError(f"{path}:{lineno}: label must be 0, 1 or '-', got {label!r}")
            entries.append(ManifestEntry(sid, rel, lab, split))
        else:
            key, sep, value = line.partition(":")
            if not sep:
                raise SchemaError(f"{path}:{lineno}: cannot parse {line!r}")
            header[key.strip()] = value.strip()
    try:
        roi_count = int(header["roi_count"])
        version = int(header.get("schema_version", SCHEMA_VERSION))
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: header needs an integer roi_count") from exc
    return DatasetManifest(tuple(entries), roi_count, version, path.parent)


@dataclass
class ValidationReport:
    issues: list[tuple[str, str]] = field(default_factory=list)
    statuses: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.issues

    def messages(self) -> list[str]:
        return [f"{who}: {msg}" for who, msg in self.issues]

    def _flag(self, who: str, msg: str):
        self.issues.append((who, msg))
        if who in self.statuses:
            self.statuses[who] = msg


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> ValidationReport:
    report = ValidationReport()
    if not manifest.entries:
        report._flag("<cohort>", "empty cohort")
    if manifest.roi_count < 1:
        report._flag("<cohort>", f"roi_count must be positive, got {manifest.roi_count}")
    if manifest.schema_version != SCHEMA_VERSION:
        report._flag("<cohort>", f"unsupported schema_version {manifest.schema_version}")
    seen: set[str] = set()
    for e in manifest.entries:
        report.statuses.setdefault(e.subject_id, "ok")
        if e.subject_id in seen:
            report._flag(e.subject_id, "duplicate subject_id")
            continue
        seen.add(e.subject_id)
        if e.split not in SPLITS:
            report._flag(e.subject_id, f"unknown split {e.split!r}")
        if e.split in LABELED_SPLITS and e.label is None:
            report._flag(e.subject_id, "label required")
        if check_files:
            path = manifest.resolve(e)
            if not path.is_file():
                report._flag(e.subject_id, f"missing file {path}")
                continue
            with open(path) as fh:
                head = fh.readline()
            if not head.startswith(MATRIX_MAGIC):
                report._flag(e.subject_id, "not a roi_timeseries file")
            elif f"N={manifest.roi_count}" not in head.split():
                report._flag(e.subject_id, f"roi count differs from manifest ({manifest.roi_count})")
    return report


def load_subject(manifest: DatasetManifest, entry: ManifestEntry) -> RoiTimeseries:
    path = manifest.resolve(entry)
    if not path.is_file():
        raise CohortLoadError(f"subject {entry.subject_id}: file not found: {path}")
    values = read_matrix(path, entry.subject_id)
    if values.shape[1] != manifest.roi_count:
        raise SchemaError(
            f"subject {entry.subject_id}: has N={values.shape[1]}, manifest expects N={manifest.roi_count}"
        )
    return normalize(RoiTimeseries(entry.subject_id, values, entry.label))


def load_cohort(manifest: DatasetManifest) -> list[RoiTimeseries]:
    """Load and z-score every subject in manifest order."""
    cohort = [load_subject(manifest, e) for e in manifest.entries]
    flagged = [s.subject_id for s in cohort if s.flagged]
    if flagged:
        logger.warning("constant ROI columns zeroed for %d subject(s): %s", len(flagged), ", ".join(flagged))
    return cohort


class AuditedCohort(Sequence):
    """Label-blind view of a cohort.

    Items are returned without labels; the only way to reach a label is
    :meth:`label_of`, and every call is appended to ``access_log``.  Adaptation
    code is handed one of these so a test can prove labels were never read.
    """

    def __init__(self, series: Sequence[RoiTimeseries]):
        self._series = [s.without_label() for s in series]
        self._labels = {s.subject_id: s.label for s in series}
        self.access_log: list[str] = []

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "AuditedCohort":
        return cls(load_cohort(manifest))

    def label_of(self, subject_id: str) -> int | None:
        self.access_log.append(subject_id)
        return self._labels[subject_id]

    def __getitem__(self, i):
        return self._series[i]

    def __len__(self):
        return len(self._series)


# -- synthetic cohorts --------------------------------------------------------


@dataclass(frozen=True)
class DomainShift:
    resample_ratio: float = 1.0
    noise_multiplier: float = 1.0
    amplitude_scale: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Two-class, two-domain cohort recipe.

    ``planted_block`` holds 1-based ROI indices whose columns share a latent
    signal in class-1 subjects.
    """

    subjects_per_class: int = 50
    n_timepoints: int = 200
    n_rois: int = 10
    planted_block: tuple[int, ...] = (1, 2, 3, 4)
    signal_strength: float = 1.0
    noise_sigma: float = 1.0
    domain_shift: DomainShift = DomainShift()
    seed: int = 0
    target_subjects_per_class: int | None = None
    val_fraction: float = 0.2
    autocorrelation: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "planted_block", tuple(int(i) for i in self.planted_block))
        if isinstance(self.domain_shift, dict):
            object.__setattr__(self, "domain_shift", DomainShift(**self.domain_shift))
        problems = []
        if self.subjects_per_class < 1:
            problems.append("subjects_per_class must be positive")
        if self.n_timepoints < 2 or self.n_rois < 2:
            problems.append("need n_timepoints >= 2 and n_rois >= 2")
        if not set(self.planted_block) <= set(range(1, self.n_rois + 1)):
            problems.append(f"planted_block must lie in 1..{self.n_rois}")
        if len(set(self.planted_block)) != len(self.planted_block):
            problems.append("planted_block has duplicates")
        reals = [self.signal_strength, self.noise_sigma, self.autocorrelation, self.val_fraction,
                 self.domain_shift.resample_ratio, self.domain_shift.noise_multiplier,
                 self.domain_shift.amplitude_scale]
        if not all(math.isfinite(float(v)) for v in reals):
            problems.append("all real parameters must be finite")
        if self.signal_strength < 0:
            problems.append("signal_strength must be >= 0")
        if self.noise_sigma <= 0:
            problems.append("noise_sigma must be > 0")
        ds = self.domain_shift
        if min(ds.resample_ratio, ds.noise_multiplier, ds.amplitude_scale) <= 0:
            problems.append("domain_shift components must be > 0")
        if not 0 <= self.autocorrelation < 1:
            problems.append("autocorrelation must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            problems.append("val_fraction must lie in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))


def _ar1(rng: np.random.Generator, L: int, n: int, phi: float) -> np.ndarray:
    """Unit-variance AR(1) columns, started from the stationary distribution."""
    eps = rng.standard_normal((L, n))
    out = np.empty((L, n))
    out[0] = eps[0]
    innov = math.sqrt(1.0 - phi * phi)
    for t in range(1, L):
        out[t] = phi * out[t - 1] + innov * eps[t]
    return out


def synth_subject(spec: SyntheticSpec, label: int, rng: np.random.Generator, target: bool) -> np.ndarray:
    """Raw (un-normalized) L x N matrix for one synthetic subject."""
    L, N = spec.n_timepoints, spec.n_rois
    values = _ar1(rng, L, N, spec.autocorrelation)
    latent = _ar1(rng, L, 1, spec.autocorrelation)
    if label == 1:
        block = [i - 1 for i in spec.planted_block]
        values[:, block] += spec.signal_strength * latent
    sigma = spec.noise_sigma * (spec.domain_shift.noise_multiplier if target else 1.0)
    values += sigma * rng.standard_normal((L, N))
    if target:
        from .enrichment import resample_columns

        values *= spec.domain_shift.amplitude_scale
        new_len = _round_half_up(spec.domain_shift.resample_ratio * L)
        if new_len != L:
            values = resample_columns(values, new_len)
    return values


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate_synthetic_cohort(spec: SyntheticSpec, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write a labeled source cohort and a domain-shifted target cohort.

    Returns the paths of ``source.manifest`` and ``target.manifest``.  Target
    labels are written too (the evaluation code needs them); adaptation code
    never reads them.
    """
    out = Path(out_dir)
    try:
        (out / "source").mkdir(parents=True, exist_ok=True)
        (out / "target").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    n_src = spec.subjects_per_class
    n_tgt = spec.target_subjects_per_class or spec.subjects_per_class
    n_val = int(round(spec.val_fraction * n_src))
    src_entries, tgt_entries = [], []
    for label in (0, 1):
        # independent streams per (domain, class) so resizing one group leaves the others unchanged
        src_seeds = np.random.SeedSequence(spec.seed, spawn_key=(0, label)).spawn(n_src)
        for k, seed in enumerate(src_seeds):
            sid = f"src{label}_{k:04d}"
            rel = f"source/{sid}.txt"
            write_matrix(out / rel, synth_subject(spec, label, np.random.default_rng(seed), target=False))
            split = "source-val" if k < n_val else "source-train"
            src_entries.append(ManifestEntry(sid, rel, label, split))
        tgt_seeds = np.random.SeedSequence(spec.seed, spawn_key=(1, label)).spawn(n_tgt)
        for k, seed in enumerate(tgt_seeds):
            sid = f"tgt{label}_{k:04d}"
            rel = f"target/{sid}.txt"
            write_matrix(out / rel, synth_subject(spec, label, np.random.default_rng(seed), target=True))
            tgt_entries.append(ManifestEntry(sid, rel, label, "target"))
    src_manifest = DatasetManifest(tuple(src_entries), spec.n_rois)
    tgt_manifest = DatasetManifest(tuple(tgt_entries), spec.n_rois)
    write_manifest(out / "source.manifest", src_manifest)
    write_manifest(out / "target.manifest", tgt_manifest)
    return out / "source.manifest", out / "target.manifest"


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
