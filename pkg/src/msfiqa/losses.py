"""Regression + exponential pairwise ranking objective.

Predictions and targets are laid out as consecutive pairs
``(0, 1), (2, 3), ...``; a pair contributes to the ranking term only when
its first target is strictly lower than its second.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

EXP_CLAMP = 50.0


@dataclass
class PairBatch:
    predictions: torch.Tensor
    targets: torch.Tensor

    def __post_init__(self):
        self.predictions = torch.as_tensor(self.predictions)
        self.targets = torch.as_tensor(self.targets, dtype=self.predictions.dtype)
        validate_pairs(self.predictions, self.targets)

    @property
    def n(self) -> int:
        return self.predictions.shape[0]


class LossRecord(NamedTuple):
    total: torch.Tensor
    reg: torch.Tensor
    rank: torch.Tensor


def validate_pairs(pred: torch.Tensor, target: torch.Tensor):
    if pred.ndim != 1 or pred.shape != target.shape:
        raise ValueError(f"predictions {tuple(pred.shape)} and targets {tuple(target.shape)} must be equal-length vectors")
    n = pred.shape[0]
    if n < 2 or n % 2:
        raise ValueError(f"pair batches need an even size >= 2, got {n}")
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise ValueError("non-finite values in pair batch")


def _clamped_exp(x: torch.Tensor) -> torch.Tensor:
    # value and gradient both taken at min(x, EXP_CLAMP)
    capped = x - (x - x.clamp(max=EXP_CLAMP)).detach()
    return torch.exp(capped)


def regression_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Euclidean loss, sum of squared residuals over 2N."""
    n = pred.shape[0]
    return ((pred - target) ** 2).sum() / (2 * n)


def rank_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pairs of exp(pred[i] - pred[i+1]) where target[i] < target[i+1]."""
    n = pred.shape[0]
    p0, p1 = pred[0::2], pred[1::2]
    active = (target[0::2] < target[1::2]).to(pred.dtype)
    return (2.0 / n) * (active * _clamped_exp(p0 - p1)).sum()


def total_loss(pred: torch.Tensor, target: torch.Tensor,
               reg_weight: float = 1.0, rank_weight: float = 1.0) -> LossRecord:
    """Combined objective. The weights exist only for single-term ablations."""
    validate_pairs(pred, target)
    reg = regression_loss(pred, target)
    rank = rank_loss(pred, target)
    return LossRecord(reg_weight * reg + rank_weight * rank, reg, rank)


def regression_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Closed-form d(regression_loss)/d(pred)."""
    pred = np.asarray(pred, dtype=float)
    return (pred - np.asarray(target, dtype=float)) / pred.shape[0]


def rank_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Closed-form d(rank_loss)/d(pred)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    n = pred.shape[0]
    grad = np.zeros_like(pred)
    active = target[0::2] < target[1::2]
    e = np.exp(np.minimum(pred[0::2] - pred[1::2], EXP_CLAMP)) * active * (2.0 / n)
    grad[0::2] = e
    grad[1::2] = -e
    return grad
