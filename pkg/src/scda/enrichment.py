"""Sliding windows, feature-enrichment views and thresholded Pearson graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import RoiTimeseries

KINDS = ("warp", "receptive_field", "slice", "none")

DEFAULT_ALPHAS = (1 / 1.3, 1 / 1.1, 1.0, 1.1, 1.3)
DEFAULT_BETAS = (40, 60, 80, 100)
DEFAULT_GAMMAS = (0.85, 0.90, 0.95, 1.00)
DEFAULT_KEEP_RATIO = 0.3


class SeriesTooShort(ValueError):
    def __init__(self, length: int, window: int, context: str = "series too short"):
        super().__init__(f"{context}: L={length} < window length l={window}")
        self.length = length
        self.window = window


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class WindowConfig:
    length: int = 40
    stride: int = 30

    def __post_init__(self):
        if self.length < 2 or self.stride < 1:
            raise ValueError(f"window needs length >= 2 and stride >= 1, got {self.length}/{self.stride}")


@dataclass(frozen=True)
class EnrichmentDomains:
    """The value sets each branch samples from."""

    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    betas: tuple[int, ...] = DEFAULT_BETAS
    gammas: tuple[float, ...] = DEFAULT_GAMMAS

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "betas", tuple(int(b) for b in self.betas))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if not self.alphas or min(self.alphas) <= 0:
            raise ValueError("alphas must be positive")
        if not self.betas or min(self.betas) < 2:
            raise ValueError("betas must be >= 2")
        if not self.gammas or not all(0 < g <= 1 for g in self.gammas):
            raise ValueError("gammas must lie in (0, 1]")


def _member(x: float, allowed: Sequence[float]) -> bool:
    return any(math.isclose(x, a, rel_tol=1e-9, abs_tol=1e-12) for a in allowed)


@dataclass(frozen=True)
class EnrichmentParams:
    kind: str = "none"
    alpha: float = 1.0
    beta: int | None = None
    gamma: float = 1.0
    slice_start: int = 0

    def validate(self, domains: EnrichmentDomains = EnrichmentDomains()) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown enrichment kind {self.kind!r}")
        if self.kind == "warp" and not _member(self.alpha, domains.alphas):
            raise ValueError(f"alpha={self.alpha} not in {domains.alphas}")
        if self.kind == "receptive_field" and self.beta not in domains.betas:
            raise ValueError(f"beta={self.beta} not in {domains.betas}")
        if self.kind == "slice":
            if not _member(self.gamma, domains.gammas):
                raise ValueError(f"gamma={self.gamma} not in {domains.gammas}")
            if self.slice_start < 0:
                raise ValueError("slice_start must be nonnegative")


def neutral_params(kind: str, cfg: WindowConfig = WindowConfig()) -> EnrichmentParams:
    """The deterministic view used at inference: identity warp, base window, full slice."""
    if kind == "receptive_field":
        return EnrichmentParams(kind, beta=cfg.length)
    return EnrichmentParams(kind)


def sample_params(
    kind: str, length: int, rng: np.random.Generator, domains: EnrichmentDomains = EnrichmentDomains()
) -> EnrichmentParams:
    """Draw one branch's enrichment for a series of ``length`` time points."""
    if kind == "warp":
        return EnrichmentParams(kind, alpha=domains.alphas[rng.integers(len(domains.alphas))])
    if kind == "receptive_field":
        return EnrichmentParams(kind, beta=domains.betas[rng.integers(len(domains.betas))])
    if kind == "slice":
        gamma = domains.gammas[rng.integers(len(domains.gammas))]
        span = length - round_half_up(gamma * length)
        return EnrichmentParams(kind, gamma=gamma, slice_start=int(rng.integers(span + 1)))
    if kind == "none":
        return EnrichmentParams(kind)
    raise ValueError(f"unknown enrichment kind {kind!r}")


# -- resampling ---------------------------------------------------------------


def resample_columns(values: np.ndarray, new_length: int) -> np.ndarray:
    """FFT resampling along axis 0; a constant column keeps its value."""
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    m = int(new_length)
    if n < 2 or m < 2:
        raise ValueError(f"resampling needs lengths >= 2, got {n} -> {m}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite input to fourier_resample")
    if m == n:
        return x.copy()
    spec = np.fft.rfft(x, axis=0)
    out_bins = m // 2 + 1
    shape = (out_bins,) + x.shape[1:]
    new = np.zeros(shape, dtype=complex)
    keep = min(n, m) // 2 + 1
    new[:keep] = spec[:keep]
    half = min(n, m) // 2
    if min(n, m) % 2 == 0:
        # the shared edge bin is a Nyquist bin on the shorter side only
        if m > n:
            new[half] = spec[half] / 2.0
        else:
            new[half] = 2.0 * spec[half].real
    return np.fft.irfft(new, n=m, axis=0) * (m / n)


def fourier_resample(signal: np.ndarray, new_length: int) -> np.ndarray:
    """Resample a 1-D signal to ``new_length`` samples in the Fourier domain."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError("fourier_resample expects a 1-D signal")
    return resample_columns(signal, new_length)


def window_warp(series: RoiTimeseries, alpha: float) -> RoiTimeseries:
    new_length = round_half_up(alpha * series.n_timepoints)
    return series.with_values(resample_columns(series.values, new_length))


def window_slice(series: RoiTimeseries, gamma: float, start: int) -> RoiTimeseries:
    L = series.n_timepoints
    length = round_half_up(gamma * L)
    if start < 0 or start + length > L:
        raise IndexError(f"slice [{start}, {start + length}) out of bounds for L={L}")
    return series.with_values(series.values[start:start + length])


# -- windows and graphs -------------------------------------------------------


def window_starts(length: int, cfg: WindowConfig) -> np.ndarray:
    if length < cfg.length:
        raise SeriesTooShort(length, cfg.length)
    p = (length - cfg.length) // cfg.stride + 1
    return np.arange(p) * cfg.stride


def partition_windows(series: RoiTimeseries | np.ndarray, cfg: WindowConfig = WindowConfig()) -> np.ndarray:
    """Stack of overlapping windows, shape (p, l, N)."""
    values = series.values if isinstance(series, RoiTimeseries) else np.asarray(series, dtype=np.float64)
    starts = window_starts(values.shape[0], cfg)
    idx = starts[:, None] + np.arange(cfg.length)[None, :]
    return values[idx]


def pearson_stack(windows: np.ndarray, return_flags: bool = False):
    """Pearson matrices for a (..., l, N) stack of windows.

    Columns with zero variance correlate 0 with everything, themselves included.
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.shape[-2] < 2:
        raise ValueError("need at least 2 time points per window")
    centered = w - w.mean(axis=-2, keepdims=True)
    ss = np.einsum("...ti,...ti->...i", centered, centered)
    scale = np.maximum(np.abs(w).max(axis=-2), 1.0) ** 2 * w.shape[-2]
    dead = ss <= 1e-20 * scale
    inv = np.where(dead, 0.0, 1.0 / np.sqrt(np.where(dead, 1.0, ss)))
    z = centered * inv[..., None, :]
    corr = np.einsum("...ti,...tj->...ij", z, z)
    corr = np.clip(corr, -1.0, 1.0)
    diag = np.where(dead, 0.0, 1.0)
    n = corr.shape[-1]
    corr[..., np.arange(n), np.arange(n)] = diag
    if return_flags:
        return corr, dead
    return corr


def pearson_matrix(window: np.ndarray, return_flags: bool = False):
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError("pearson_matrix expects an l x N window")
    return pearson_stack(window, return_flags=return_flags)


def edge_budget(n_nodes: int, keep_ratio: float) -> int:
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    pairs = n_nodes * (n_nodes - 1) // 2
    # round first so float noise (0.07 * 300 = 21.000000000000004) does not add an edge
    return min(pairs, math.ceil(round(keep_ratio * pairs, 9)))


def threshold_stack(weights: np.ndarray, keep_ratio: float = DEFAULT_KEEP_RATIO, absolute: bool = False) -> np.ndarray:
    """Binary adjacency keeping the top ``keep_ratio`` of upper-triangle edges.

    Ties at the cut are resolved in favour of the lexicographically smaller
    (i, j), so the result is platform independent.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[-1]
    iu, ju = np.triu_indices(n, 1)
    vals = w[..., iu, ju]
    if absolute:
        vals = np.abs(vals)
    k = edge_budget(n, keep_ratio)
    order = np.argsort(-vals, axis=-1, kind="stable")[..., :k]
    upper = np.zeros(vals.shape, dtype=bool)
    np.put_along_axis(upper, order, True, axis=-1)
    adj = np.zeros(w.shape, dtype=np.uint8)
    adj[..., iu, ju] = upper
    adj[..., ju, iu] = upper
    return adj


def threshold_adjacency(weights: np.ndarray, keep_ratio: float = DEFAULT_KEEP_RATIO, absolute: bool = False) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        raise ValueError("threshold_adjacency expects a square matrix")
    return threshold_stack(weights, keep_ratio, absolute)


@dataclass(frozen=True, eq=False)
class WindowGraph:
    adjacency: np.ndarray
    window_index: int

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def node_features(self) -> np.ndarray:
        return np.eye(self.n_nodes)


def enrich(series: RoiTimeseries, params: EnrichmentParams, cfg: WindowConfig) -> tuple[np.ndarray, WindowConfig]:
    """Apply one enrichment; returns the transformed values and the window config to use."""
    if params.kind == "warp":
        values = window_warp(series, params.alpha).values
        return values, cfg
    if params.kind == "receptive_field":
        return series.values, WindowConfig(params.beta if params.beta is not None else cfg.length, cfg.stride)
    if params.kind == "slice":
        return window_slice(series, params.gamma, params.slice_start).values, cfg
    if params.kind == "none":
        return series.values, cfg
    raise ValueError(f"unknown enrichment kind {params.kind!r}")


def adjacency_sequence(
    series: RoiTimeseries,
    params: EnrichmentParams = EnrichmentParams(),
    cfg: WindowConfig = WindowConfig(),
    keep_ratio: float = DEFAULT_KEEP_RATIO,
    absolute: bool = False,
) -> np.ndarray:
    """Adjacency stack (p, N, N) for one enrichment view of ``series``."""
    values, wcfg = enrich(series, params, cfg)
    if values.shape[0] < wcfg.length:
        raise SeriesTooShort(values.shape[0], wcfg.length, "series too short after enrichment")
    corr = pearson_stack(partition_windows(values, wcfg))
    return threshold_stack(corr, keep_ratio, absolute)


def build_graph_sequence(
    series: RoiTimeseries,
    params: EnrichmentParams = EnrichmentParams(),
    cfg: WindowConfig = WindowConfig(),
    keep_ratio: float = DEFAULT_KEEP_RATIO,
    absolute: bool = False,
) -> list[WindowGraph]:
    adj = adjacency_sequence(series, params, cfg, keep_ratio, absolute)
    return [WindowGraph(a, t) for t, a in enumerate(adj)]
