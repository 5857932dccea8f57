"""Training objectives: ABSLD, the fixed-temperature RSLAD-style baseline, SAT and TRADES."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from .core_math import kl_div_from_logits

LOSSES = ("absld", "rslad", "sat", "trades", "sat-smooth")


class LossTerms(NamedTuple):
    total: torch.Tensor
    adv: torch.Tensor
    clean: torch.Tensor


def class_mean(values: torch.Tensor, y: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Average within each label, then across the labels present in the batch."""
    sums = torch.zeros(num_classes, dtype=values.dtype).index_add(0, y, values)
    counts = torch.bincount(y, minlength=num_classes)
    present = counts > 0
    return (sums[present] / counts[present].to(values.dtype)).mean()


def _check_shapes(*tensors) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")
    if len(shape) != 2:
        raise ValueError(f"expected (batch, classes) tensors, got shape {tuple(shape)}")


def absld_loss_terms(
    student_logits_adv: torch.Tensor,
    student_logits_clean: torch.Tensor,
    teacher_adv_targets: torch.Tensor,
    teacher_clean_targets: torch.Tensor,
    y: torch.Tensor,
    alpha: float = 0.9,
    tau_student: float = 1.0,
) -> LossTerms:
    """Class-averaged KL of the student's adversarial and clean outputs to the
    re-temperated teacher targets, mixed by ``alpha``.

    The targets are expected to be computed on clean inputs, the adversarial
    one with the adversarial-branch temperatures.
    """
    _check_shapes(student_logits_adv, student_logits_clean, teacher_adv_targets, teacher_clean_targets)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if y.shape != student_logits_adv.shape[:1]:
        raise ValueError("labels must have one entry per sample")
    num_classes = student_logits_adv.shape[1]
    kl_adv = kl_div_from_logits(F.log_softmax(student_logits_adv / tau_student, dim=1), teacher_adv_targets)
    kl_clean = kl_div_from_logits(F.log_softmax(student_logits_clean / tau_student, dim=1), teacher_clean_targets)
    adv = class_mean(kl_adv, y, num_classes)
    clean = class_mean(kl_clean, y, num_classes)
    return LossTerms(alpha * adv + (1.0 - alpha) * clean, adv, clean)


def absld_loss(*args, **kwargs) -> torch.Tensor:
    return absld_loss_terms(*args, **kwargs).total


def rslad_loss_terms(
    student_logits_adv: torch.Tensor,
    student_logits_clean: torch.Tensor,
    teacher_clean_targets: torch.Tensor,
    y: torch.Tensor,
    alpha: float = 0.9,
) -> LossTerms:
    """Fixed-temperature distillation: both branches match the teacher's plain softmax."""
    return absld_loss_terms(
        student_logits_adv, student_logits_clean, teacher_clean_targets, teacher_clean_targets, y, alpha
    )


def rslad_loss(*args, **kwargs) -> torch.Tensor:
    return rslad_loss_terms(*args, **kwargs).total


def sat_loss(student_logits_adv: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(student_logits_adv, y)


def soft_label_loss(student_logits_adv: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL to fixed soft labels (label-smoothed adversarial training)."""
    _check_shapes(student_logits_adv, targets)
    return kl_div_from_logits(F.log_softmax(student_logits_adv, dim=1), targets).mean()


def trades_loss_terms(
    student_logits_clean: torch.Tensor,
    student_logits_adv: torch.Tensor,
    y: torch.Tensor,
    lambda_trades: float = 6.0,
) -> LossTerms:
    """Natural cross-entropy plus ``lambda_trades`` times KL(clean || adv).

    Gradients flow through both the clean and the adversarial output.
    """
    _check_shapes(student_logits_clean, student_logits_adv)
    natural = F.cross_entropy(student_logits_clean, y)
    boundary = kl_div_from_logits(
        F.log_softmax(student_logits_adv, dim=1), F.softmax(student_logits_clean, dim=1)
    ).mean()
    return LossTerms(natural + lambda_trades * boundary, boundary, natural)


def trades_loss(*args, **kwargs) -> torch.Tensor:
    return trades_loss_terms(*args, **kwargs).total
