"""Maximum Density Divergence alignment, cross-entropy and their weighted sum."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import BatchPairingError, ConfigError, NumericError


@dataclass
class LabeledLatentBatch:
    latents: torch.Tensor  # (N, F') projected features
    labels: torch.Tensor  # (N,)
    dataset_id: str = ""

    def __post_init__(self) -> None:
        self.latents = torch.as_tensor(self.latents)
        self.labels = torch.as_tensor(self.labels).long()
        if self.latents.dim() != 2 or self.latents.shape[0] < 1:
            raise BatchPairingError(f"latents must be (N >= 1, F), got {tuple(self.latents.shape)}")
        if self.labels.shape != (self.latents.shape[0],):
            raise BatchPairingError(f"{self.labels.shape[0]} labels for {self.latents.shape[0]} latents")


@dataclass
class LossWeights:
    w1: float = 1.0  # cross-entropy
    w2: float = 0.1  # MDD

    def __post_init__(self) -> None:
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got w1={self.w1}, w2={self.w2}")
        if self.w1 == 0 and self.w2 == 0:
            raise ConfigError("loss weights w1 and w2 cannot both be zero")


def intra_class_density(latents: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean squared distance over unordered same-label pairs (i < j); 0 if none."""
    diff = latents.unsqueeze(1) - latents.unsqueeze(0)
    sq = (diff * diff).sum(-1)
    same = labels.unsqueeze(1) == labels.unsqueeze(0)
    upper = torch.triu(torch.ones_like(same), diagonal=1)
    mask = same & upper
    m = int(mask.sum())
    if m == 0:
        return latents.sum() * 0.0
    return (sq * mask).sum() / m


def mdd_terms(a: LabeledLatentBatch, b: LabeledLatentBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if a.latents.shape[0] != b.latents.shape[0]:
        raise BatchPairingError(
            f"MDD pairs batches by index: {a.dataset_id or 'a'} has {a.latents.shape[0]} rows, "
            f"{b.dataset_id or 'b'} has {b.latents.shape[0]}"
        )
    if a.latents.shape[1] != b.latents.shape[1]:
        raise BatchPairingError(f"latent widths differ: {a.latents.shape[1]} vs {b.latents.shape[1]}")
    d = a.latents - b.latents
    paired = (d * d).sum(-1).mean()
    return paired, intra_class_density(a.latents, a.labels), intra_class_density(b.latents, b.labels)


def mdd_pairwise(a: LabeledLatentBatch, b: LabeledLatentBatch) -> torch.Tensor:
    """Index-paired inter-dataset distance plus intra-class density of each side."""
    t1, t2, t3 = mdd_terms(a, b)
    return t1 + t2 + t3


def mdd_total(batches: Sequence[LabeledLatentBatch]) -> torch.Tensor:
    """Sum of ``mdd_pairwise`` over every unordered pair of datasets."""
    if len(batches) < 2:
        raise ConfigError(f"MDD needs at least two datasets, got {len(batches)}")
    total = None
    for a, b in itertools.combinations(batches, 2):
        term = mdd_pairwise(a, b)
        total = term if total is None else total + term
    return total


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels).long()
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to cross_entropy")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ConfigError(f"labels must lie in [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def total_loss(ce: torch.Tensor | float, mdd: torch.Tensor | float, w: LossWeights):
    return w.w1 * ce + w.w2 * mdd
