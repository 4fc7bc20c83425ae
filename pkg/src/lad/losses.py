"""Segmentation and distillation losses.

Logits are ``(C, H, W)`` or ``(B, C, H, W)``. Every loss is evaluated in
float64 so logged components add up exactly to the logged total.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from lad.lnm import IGNORE


@dataclass(frozen=True)
class LossWeights:
    lambda_consistency: float = 1.0
    beta_kd: float = 3.0
    temperature: float = 4.0

    def __post_init__(self):
        if self.lambda_consistency < 0 or self.beta_kd < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _batched(logits: torch.Tensor) -> torch.Tensor:
    if logits.dim() == 3:
        return logits.unsqueeze(0)
    if logits.dim() != 4:
        raise ValueError(f"logits must be (C, H, W) or (B, C, H, W), got {tuple(logits.shape)}")
    return logits


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise FloatingPointError("non-finite logits")


def cross_entropy_seg(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-IGNORE pixels; 0 when every pixel is IGNORE."""
    logits = _batched(logits)
    if label.dim() == 2:
        label = label.unsqueeze(0)
    if logits.shape[1] < 1:
        raise ValueError("logits have no classes")
    if logits.shape[0] != label.shape[0] or logits.shape[2:] != label.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match label {tuple(label.shape)}")
    _check_finite(logits)
    label = label.long()
    count = int((label != IGNORE).sum())
    if count == 0:
        return logits.sum() * 0.0
    total = F.cross_entropy(logits.double(), label, ignore_index=IGNORE, reduction="sum")
    return total / count


def cwd_loss(
    teacher: torch.Tensor,
    student: torch.Tensor,
    temperature: float = 4.0,
    detach_teacher: bool = True,
) -> torch.Tensor:
    """Channel-wise distillation.

    Each channel is turned into a distribution over its H*W positions with a
    temperature softmax; the loss is ``tau^2`` times the KL(teacher || student)
    averaged over channels (and batch).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    teacher, student = _batched(teacher), _batched(student)
    if teacher.shape != student.shape:
        raise ValueError(f"shape mismatch: teacher {tuple(teacher.shape)} vs student {tuple(student.shape)}")
    _check_finite(teacher, student)
    if detach_teacher:
        teacher = teacher.detach()
    b, c = student.shape[:2]
    t = teacher.double().reshape(b, c, -1) / temperature
    s = student.double().reshape(b, c, -1) / temperature
    log_p = F.log_softmax(t, dim=-1)
    log_q = F.log_softmax(s, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(-1)
    return temperature**2 * kl.mean()


def consistency_distance(
    o1: torch.Tensor, o2: torch.Tensor, temperature: float = 4.0, symmetric: bool = True
) -> torch.Tensor:
    """Distance between the two teacher paths; gradients reach both paths."""
    forward = cwd_loss(o1, o2, temperature, detach_teacher=False)
    if not symmetric:
        return forward
    return 0.5 * (forward + cwd_loss(o2, o1, temperature, detach_teacher=False))


def teacher_loss(
    o1: torch.Tensor,
    o2: torch.Tensor,
    label: torch.Tensor,
    weights: LossWeights = LossWeights(),
    symmetric: bool = True,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Dual-path teacher objective: CE on both paths plus weighted consistency.

    Returns the total and a breakdown with keys ``ce1``, ``ce2``,
    ``consistency`` (unweighted) and ``weighted_consistency``.
    """
    ce1 = cross_entropy_seg(o1, label)
    ce2 = cross_entropy_seg(o2, label)
    dist = consistency_distance(o1, o2, weights.temperature, symmetric)
    weighted = weights.lambda_consistency * dist
    total = (ce1 + ce2) + weighted
    return total, {"ce1": ce1, "ce2": ce2, "consistency": dist, "weighted_consistency": weighted}


def student_loss(
    student: torch.Tensor,
    teacher: torch.Tensor,
    label: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """CE on the label plus ``beta`` times CWD towards the (detached) teacher."""
    ce = cross_entropy_seg(student, label)
    kd = cwd_loss(teacher, student, weights.temperature, detach_teacher=True)
    weighted = weights.beta_kd * kd
    return ce + weighted, {"ce": ce, "kd": kd, "weighted_kd": weighted}
