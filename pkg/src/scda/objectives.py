"""Training objectives and branch-parameter algebra.

Losses accept torch tensors (differentiable) or array-likes.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError


def _tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def bce_loss(logits, labels) -> torch.Tensor:
    """Mean binary cross-entropy on raw logits (log-sum-exp form)."""
    logits, labels = _tensor(logits), _tensor(labels).to(_tensor(logits).dtype)
    if logits.shape != labels.shape or logits.numel() == 0:
        raise ContractError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} must match and be nonempty")
    return F.binary_cross_entropy_with_logits(logits, labels)


@dataclass
class ConsistencyBatch:
    """Branch outputs for one batch: ``features`` (N_T, m, D), ``logits`` (N_T, m)."""

    features: torch.Tensor
    logits: torch.Tensor

    def __post_init__(self):
        self.features = _tensor(self.features)
        self.logits = _tensor(self.logits)
        if self.features.ndim != 3 or self.logits.shape != self.features.shape[:2]:
            raise ContractError(
                f"expected features (N_T, m, D) and logits (N_T, m), got "
                f"{tuple(self.features.shape)} and {tuple(self.logits.shape)}"
            )
        if self.features.shape[1] < 2:
            raise ContractError("mutual consistency needs at least two branches")

    @classmethod
    def from_branches(cls, features: Sequence, logits: Sequence) -> "ConsistencyBatch":
        """Stack per-branch (N_T, D) features and (N_T,) logits."""
        return cls(torch.stack([_tensor(f) for f in features], dim=1),
                   torch.stack([_tensor(o) for o in logits], dim=1))

    @property
    def n_subjects(self) -> int:
        return self.features.shape[0]

    @property
    def n_branches(self) -> int:
        return self.features.shape[1]


def _pairwise_sq(x: torch.Tensor, ordered: bool) -> torch.Tensor:
    # x: (N_T, m, D); sum over branch pairs of squared distances, per subject
    diff = x.unsqueeze(2) - x.unsqueeze(1)
    per_pair = (diff ** 2).sum(dim=-1)
    total = per_pair.sum(dim=(1, 2))
    return total if ordered else total / 2


def feature_consistency(batch: ConsistencyBatch, ordered: bool = True) -> torch.Tensor:
    """Mean over subjects of summed squared feature gaps over branch pairs.

    ``ordered=True`` counts (i, j) and (j, i) separately.
    """
    return _pairwise_sq(batch.features, ordered).mean()


def logit_consistency(batch: ConsistencyBatch, ordered: bool = True) -> torch.Tensor:
    return _pairwise_sq(batch.logits.unsqueeze(-1), ordered).mean()


def mutual_consistency(batch: ConsistencyBatch, ordered: bool = True) -> torch.Tensor:
    return feature_consistency(batch, ordered) + logit_consistency(batch, ordered)


def average_parameters(branches: Sequence) -> "OrderedDict[str, torch.Tensor]":
    """Elementwise mean of several branches' tensors, norm statistics included.

    Integer counters (batch-norm ``num_batches_tracked``) are averaged with
    floor division.
    """
    if not branches:
        raise ContractError("no branches to average")
    names = list(branches[0].keys())
    for b in branches[1:]:
        if list(b.keys()) != names:
            raise ContractError("branches do not share parameter names")
    out = OrderedDict()
    for name in names:
        tensors = [b[name] for b in branches]
        shape = tensors[0].shape
        if any(t.shape != shape for t in tensors):
            raise ContractError(f"shape mismatch for {name}: {[tuple(t.shape) for t in tensors]}")
        stacked = torch.stack([t.detach() for t in tensors])
        if stacked.is_floating_point():
            # offset form keeps identical branches bit-exact, unlike sum / m
            out[name] = stacked[0] + (stacked[1:] - stacked[0]).sum(dim=0) / len(tensors)
        else:
            out[name] = stacked.sum(dim=0) // len(tensors)
    return out
