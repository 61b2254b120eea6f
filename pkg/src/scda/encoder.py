"""Spatiotemporal graph encoder shared by the source model and every branch.

Per window: two GIN layers over the thresholded graph (one-hot node inputs),
concatenated to a D-wide node embedding, then a squeeze-excitation gate over
ROIs.  Across windows: single-head self-attention and a one-layer MLP, averaged
into a subject embedding that a linear head turns into one logit.

Node embeddings are stored node-major, ``(..., N, d)``.
"""

from __future__ import annotations

import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError

DTYPE = torch.float64
CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_rois: int
    hidden: int = 64
    n_layers: int = 2
    norm: bool = True

    def __post_init__(self):
        if self.n_rois < 2:
            raise ContractError("need at least 2 ROIs")
        if self.n_layers < 1 or self.hidden % self.n_layers:
            raise ContractError(f"hidden={self.hidden} must split evenly over {self.n_layers} GIN layers")

    @property
    def width(self) -> int:
        return self.hidden // self.n_layers

    @classmethod
    def from_params(cls, params) -> "EncoderConfig":
        n_layers = sum(1 for k in params if k.startswith("gin.") and k.endswith(".W"))
        n_rois, width = params["gin.0.W"].shape
        return cls(int(n_rois), int(width) * n_layers, n_layers, norm="se.norm.weight" in params)


class FeatureNorm(nn.BatchNorm1d):
    """Batch norm over the last axis of an arbitrarily shaped tensor."""

    def forward(self, x):
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        if self.training and flat.shape[0] < 2:
            # a single row has no batch variance; fall back to running statistics
            out = F.batch_norm(flat, self.running_mean, self.running_var, self.weight, self.bias,
                               False, 0.0, self.eps)
        else:
            out = super().forward(flat)
        return out.reshape(shape)


class Affine(nn.Module):
    """``x @ W.T + b`` with W stored (out, in)."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.W = nn.Parameter(torch.empty(d_out, d_in, dtype=DTYPE))
        self.b = nn.Parameter(torch.empty(d_out, dtype=DTYPE))

    def reset_parameters(self, generator=None):
        bound = 1.0 / math.sqrt(self.W.shape[1])
        nn.init.uniform_(self.W, -bound, bound, generator=generator)
        nn.init.uniform_(self.b, -bound, bound, generator=generator)

    def forward(self, x):
        return x @ self.W.T + self.b


# -- functional pieces --------------------------------------------------------


def gin_layer_forward(h_prev, adj, weight, eps, norm=None, activation: Callable | None = F.gelu):
    """One GIN update ``sigma((eps*I + A) H W)``.

    ``h_prev=None`` stands for the one-hot node features (the identity), which
    skips a dense N x N product at the first layer.
    """
    n = adj.shape[-1]
    if adj.shape[-2] != n:
        raise ContractError(f"adjacency must be square, got {tuple(adj.shape)}")
    if h_prev is None:
        eye = torch.eye(n, dtype=adj.dtype)
        agg = eps * eye + adj
    else:
        if h_prev.shape[-2] != n:
            raise ContractError(f"features have {h_prev.shape[-2]} nodes, adjacency has {n}")
        agg = eps * h_prev + adj @ h_prev
    if agg.shape[-1] != weight.shape[0]:
        raise ContractError(f"feature width {agg.shape[-1]} does not match weight {tuple(weight.shape)}")
    z = agg @ weight
    if norm is not None:
        z = norm(z)
    return activation(z) if activation is not None else z


def spatial_attention(h, w1, w2, norm=None, gate: Callable = torch.sigmoid):
    """Squeeze-excitation over ROIs.

    Returns the per-ROI gate ``M`` (..., N) and the gated node average (..., D).
    """
    if w2.shape != (h.shape[-2], h.shape[-1]):
        raise ContractError(f"se.w2 must be (N, D) = {tuple(h.shape[-2:])}, got {tuple(w2.shape)}")
    squeezed = h.mean(dim=-2) @ w1.T
    if norm is not None:
        squeezed = norm(squeezed)
    m = gate(F.gelu(squeezed) @ w2.T)
    return m, (h * m.unsqueeze(-1)).mean(dim=-2)


def temporal_attention(h_hat, phi1, phi2, phi3, post, mask=None, return_weights=False):
    """Single-head self-attention across windows, then ``GELU(post(.))``.

    ``h_hat`` is (B, p, D) or (p, D); ``mask`` (B, p) marks real windows when
    subjects are padded to a common p.
    """
    q, k, v = phi1(h_hat), phi2(h_hat), phi3(h_hat)
    scores = q @ k.transpose(-1, -2) / math.sqrt(h_hat.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    z = torch.softmax(scores, dim=-1)
    out = F.gelu(post(z @ v))
    return (out, z) if return_weights else out


# -- modules ------------------------------------------------------------------


class GINLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, norm: bool):
        super().__init__()
        self.W = nn.Parameter(torch.empty(d_in, d_out, dtype=DTYPE))
        self.eps = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.norm = FeatureNorm(d_out, dtype=DTYPE) if norm else None

    def reset_parameters(self, generator=None):
        nn.init.xavier_uniform_(self.W, generator=generator)
        with torch.no_grad():
            self.eps.zero_()

    def forward(self, h_prev, adj):
        return gin_layer_forward(h_prev, adj, self.W, self.eps, self.norm)


class SqueezeExcitation(nn.Module):
    def __init__(self, n_rois: int, hidden: int, norm: bool):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(hidden, hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(n_rois, hidden, dtype=DTYPE))
        self.norm = FeatureNorm(hidden, dtype=DTYPE) if norm else None

    def reset_parameters(self, generator=None):
        nn.init.xavier_uniform_(self.w1, generator=generator)
        nn.init.xavier_uniform_(self.w2, generator=generator)

    def forward(self, h):
        return spatial_attention(h, self.w1, self.w2, self.norm)


class TemporalAttention(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.phi1 = Affine(hidden, hidden)
        self.phi2 = Affine(hidden, hidden)
        self.phi3 = Affine(hidden, hidden)
        self.post = Affine(hidden, hidden)

    def forward(self, h_hat, mask=None):
        return temporal_attention(h_hat, self.phi1, self.phi2, self.phi3, self.post, mask)


@dataclass
class EncoderOutput:
    features: torch.Tensor  # (B, D) window-averaged spatiotemporal embedding
    logits: torch.Tensor  # (B,)
    attention: torch.Tensor  # (B, N) window-averaged ROI gate


class SpatioTemporalEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.gin = nn.ModuleList(
            GINLayer(config.n_rois if k == 0 else w, w, config.norm) for k in range(config.n_layers)
        )
        self.se = SqueezeExcitation(config.n_rois, config.hidden, config.norm)
        self.attn = TemporalAttention(config.hidden)
        self.head = Affine(config.hidden, 1)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        for module in self.modules():
            if module is not self and hasattr(module, "reset_parameters"):
                if isinstance(module, nn.BatchNorm1d):
                    module.reset_parameters()
                else:
                    module.reset_parameters(generator)

    def forward(self, adjacency: Sequence[torch.Tensor | np.ndarray]) -> EncoderOutput:
        """Encode a batch of subjects; ``adjacency[b]`` is a (p_b, N, N) stack."""
        if len(adjacency) == 0:
            raise ContractError("empty batch")
        stacks = [torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a, dtype=DTYPE)
                  for a in adjacency]
        n = self.config.n_rois
        for a in stacks:
            if a.ndim != 3 or a.shape[0] < 1 or a.shape[1:] != (n, n):
                raise ContractError(f"expected a (p>=1, {n}, {n}) adjacency stack, got {tuple(a.shape)}")
        counts = [a.shape[0] for a in stacks]
        adj = torch.cat(stacks)

        h, layers = None, []
        for layer in self.gin:
            h = layer(h, adj)
            layers.append(h)
        h = torch.cat(layers, dim=-1)  # (P, N, D)
        gate, h_hat = self.se(h)

        batch, p_max = len(counts), max(counts)
        if all(c == p_max for c in counts):
            seq = h_hat.reshape(batch, p_max, -1)
            mask = None
            feats = self.attn(seq).mean(dim=1)
            attention = gate.reshape(batch, p_max, n).mean(dim=1)
        else:
            idx = torch.tensor([b for b, c in enumerate(counts) for _ in range(c)])
            pos = torch.tensor([t for c in counts for t in range(c)])
            seq = h_hat.new_zeros(batch, p_max, h_hat.shape[-1]).index_put((idx, pos), h_hat)
            mask = torch.zeros(batch, p_max, dtype=torch.bool).index_put((idx, pos), torch.tensor(True))
            weights = mask.to(DTYPE) / torch.tensor(counts, dtype=DTYPE).unsqueeze(1)
            feats = (self.attn(seq, mask) * weights.unsqueeze(-1)).sum(dim=1)
            padded_gate = gate.new_zeros(batch, p_max, n).index_put((idx, pos), gate)
            attention = (padded_gate * weights.unsqueeze(-1)).sum(dim=1)
        logits = self.head(feats).squeeze(-1)
        return EncoderOutput(feats, logits, attention)


def build_encoder(config: EncoderConfig, seed: int | None = None) -> SpatioTemporalEncoder:
    model = SpatioTemporalEncoder(config)
    if seed is not None:
        model.reset_parameters(torch.Generator().manual_seed(int(seed)))
    return model


def params_of(model: nn.Module):
    """Detached copy of every tensor that defines a branch."""
    return OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())


def encoder_from_params(params, config: EncoderConfig | None = None) -> SpatioTemporalEncoder:
    model = SpatioTemporalEncoder(config or EncoderConfig.from_params(params))
    model.load_state_dict(params)
    return model


@dataclass
class BranchOutput:
    features: np.ndarray
    logit: float
    attention: np.ndarray


def _adjacency_of(graphs) -> np.ndarray:
    if isinstance(graphs, np.ndarray):
        return graphs
    if len(graphs) == 0:
        raise ContractError("encode_subject needs at least one window graph")
    return np.stack([g.adjacency for g in graphs])


def encode_subject(graphs, params) -> BranchOutput:
    """Inference-mode encoding of one subject's window graphs."""
    adj = _adjacency_of(graphs)
    if adj.shape[0] == 0:
        raise ContractError("encode_subject needs at least one window graph")
    model = params if isinstance(params, nn.Module) else encoder_from_params(params)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model([adj])
    finally:
        model.train(was_training)
    return BranchOutput(out.features[0].numpy(), float(out.logits[0]), out.attention[0].numpy())


def predict_probability(logit):
    """Overflow-free sigmoid for scalars or arrays."""
    x = np.asarray(logit, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, branches: Sequence, meta: dict | None = None) -> None:
    """Write one or more branches to a single ``.npz`` archive.

    A lone branch is stored under its canonical names (``gin.0.W``,
    ``se.w1``, ``attn.phi1.W``, ``head.b`` ...); several branches are prefixed
    ``branch<i>/``.  ``__meta__`` holds a JSON record with D, K, N and the schema
    version plus any caller fields.
    """
    if not branches:
        raise ContractError("nothing to save")
    config = EncoderConfig.from_params(branches[0])
    record = {"schema_version": CHECKPOINT_SCHEMA, "D": config.hidden, "K": config.n_layers,
              "N": config.n_rois, "norm": config.norm, "branches": len(branches)}
    record.update(meta or {})
    arrays = {}
    for i, params in enumerate(branches):
        prefix = "" if len(branches) == 1 else f"branch{i}/"
        for name, tensor in params.items():
            arrays[prefix + name] = tensor.detach().cpu().numpy()
    arrays["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[list, dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ContractError(f"unsupported checkpoint schema {meta.get('schema_version')}")
        n_branches = int(meta["branches"])
        branches = [OrderedDict() for _ in range(n_branches)]
        for key in archive.files:
            if key == "__meta__":
                continue
            if n_branches == 1:
                i, name = 0, key
            else:
                head, name = key.split("/", 1)
                i = int(head[len("branch"):])
            branches[i][name] = torch.from_numpy(archive[key].copy())
    return branches, meta
