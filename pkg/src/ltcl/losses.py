"""Balanced softmax with a class-distribution prior, adaptive lambda, integrated loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

BS_VARIANTS = ("paper", "log_count")


@dataclass(frozen=True)
class DistributionVector:
    counts: torch.Tensor  # float64, one entry per seen class

    @property
    def normalized(self) -> torch.Tensor:
        total = self.counts.sum()
        if total <= 0:
            return torch.zeros_like(self.counts)
        return self.counts / total

    def adjustment(self, variant="paper") -> torch.Tensor:
        """Additive logit offset: normalised counts, or log counts for ``log_count``."""
        if variant == "paper":
            return self.normalized
        if variant == "log_count":
            # classes absent from the phase get no offset
            out = torch.zeros_like(self.counts)
            pos = self.counts > 0
            out[pos] = torch.log(self.counts[pos])
            return out
        raise ParameterError(f"unknown balanced-softmax variant {variant!r}")


def distribution_vector(targets, num_seen: int) -> DistributionVector:
    """Per-class counts of an effective training set.

    ``targets`` is an iterable whose items are either an int class index
    (a real sample, counted once) or a length-``num_seen`` weight vector /
    ``{class: weight}`` mapping (a soft-labelled synthetic sample, counted
    fractionally).
    """
    counts = torch.zeros(num_seen, dtype=torch.float64)
    n = 0
    for t in targets:
        n += 1
        if isinstance(t, dict):
            for k, w in t.items():
                _check_index(k, num_seen)
                counts[k] += float(w)
        elif isinstance(t, (int,)) or (torch.is_tensor(t) and t.dim() == 0):
            k = int(t)
            _check_index(k, num_seen)
            counts[k] += 1.0
        else:
            vec = torch.as_tensor(t, dtype=torch.float64)
            if vec.shape != (num_seen,):
                raise ShapeError(f"soft label of shape {tuple(vec.shape)}, expected ({num_seen},)")
            counts += vec
    if n == 0:
        raise ParameterError("cannot build a distribution vector from an empty set")
    return DistributionVector(counts)


def _check_index(k, num_seen):
    if not 0 <= int(k) < num_seen:
        raise ParameterError(f"label {k} outside the {num_seen} seen classes")


def as_soft_targets(targets, num_classes, dtype=torch.float32):
    if targets.dim() == 1:
        return F.one_hot(targets.long(), num_classes).to(dtype)
    return targets.to(dtype)


def soft_cross_entropy(logits, targets):
    """Mean over the batch of ``-sum_k target_k * log softmax(logits)_k``."""
    targets = as_soft_targets(targets, logits.shape[1], logits.dtype)
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def balanced_softmax_loss(logits, targets, prior, tol=1e-6):
    """Soft-target cross-entropy on logits shifted by ``prior`` (one entry per class)."""
    if logits.dim() != 2:
        raise ShapeError(f"logits must be (B, C), got {tuple(logits.shape)}")
    B, C = logits.shape
    prior = torch.as_tensor(prior, dtype=logits.dtype, device=logits.device)
    if prior.shape != (C,):
        raise ShapeError(f"prior of shape {tuple(prior.shape)} for {C} classes")
    targets = as_soft_targets(targets, C, logits.dtype)
    if targets.shape != (B, C):
        raise ShapeError(f"targets {tuple(targets.shape)} vs logits {tuple(logits.shape)}")
    row_sums = targets.sum(dim=1)
    bad = (row_sums - 1).abs() > tol
    if bad.any():
        raise ParameterError(f"target rows must sum to 1 (row {int(bad.nonzero()[0])} sums to "
                             f"{float(row_sums[bad][0]):.8f})")
    return soft_cross_entropy(logits + prior, targets)


def adaptive_lambda(size_current, size_cumulative) -> float:
    if size_cumulative <= 0:
        raise ParameterError("cumulative training size must be positive")
    if not 0 < size_current <= size_cumulative:
        raise ParameterError(f"need 0 < |D_i| <= |D_1:i|, got {size_current}, {size_cumulative}")
    return math.sqrt(size_current / size_cumulative)


def integrated_loss(bs, fkd, lam):
    if not 0 < lam <= 1:
        raise ParameterError(f"lambda must lie in (0, 1], got {lam}")
    if fkd is None:
        return bs
    return bs + lam * fkd
