"""Feature distillation through a predictor head, and the logit-KD baseline."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

EPS = 1e-8
MODES = ("feature_cosine", "feature_mse", "logit")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "feature_cosine"
    temperature: float = 2.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown distillation mode {self.mode!r}")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")


def cosine_rows(a, b, eps=EPS):
    """Row-wise cosine similarity with ``eps`` added to both norms."""
    num = (a * b).sum(dim=1)
    return num / ((a.norm(dim=1) + eps) * (b.norm(dim=1) + eps))


def fkd_loss(student_features, teacher_features, predictor=None, mode="feature_cosine"):
    """Mean over the batch of ``1 - cos(g(student), teacher)``.

    ``predictor`` is the head ``g``; pass ``None`` to compare raw features.
    The teacher side is detached. ``mode="feature_mse"`` swaps the cosine
    distance for the mean squared error.
    """
    if student_features.shape != teacher_features.shape or student_features.dim() != 2:
        raise ShapeError(
            f"student {tuple(student_features.shape)} vs teacher {tuple(teacher_features.shape)}"
        )
    mapped = predictor(student_features) if predictor is not None else student_features
    target = teacher_features.detach()
    if mode == "feature_mse":
        return F.mse_loss(mapped, target)
    if mode != "feature_cosine":
        raise ParameterError(f"fkd_loss does not handle mode {mode!r}")
    return (1.0 - cosine_rows(mapped, target)).mean()


def logit_kd_loss(student_logits, teacher_logits, temperature=2.0):
    """Cross-entropy of the softened teacher distribution against the student's.

    Both inputs must already be restricted to the old-class columns.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"{tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    soft_target = F.softmax(teacher_logits.detach() / temperature, dim=1)
    log_student = F.log_softmax(student_logits / temperature, dim=1)
    return -(soft_target * log_student).sum(dim=1).mean()


def baseline_mixed_loss(kd, ce, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * kd + (1.0 - alpha) * ce
