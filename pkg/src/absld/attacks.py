"""White-box L-infinity attacks: FGSM, PGD, CW-inf and the KL-guided inner maximization."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core_math import kl_div_from_logits

OBJECTIVES = ("ce", "kl", "cw")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start_scale: float = 0.001
    objective: str = "ce"
    kappa: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.random_start_scale < 0:
            raise ValueError("random_start_scale must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


# Evaluation settings; PGD and CW use 20 and 30 steps of 2/255 at eps 8/255.
PGD20 = AttackConfig(steps=20, objective="ce")
CW30 = AttackConfig(steps=30, objective="cw")
PGD10_TRAIN = AttackConfig(steps=10, objective="kl")


@dataclass
class AdversarialBatch:
    x_adv: torch.Tensor
    achieved_objective: torch.Tensor


def cw_margin(logits: torch.Tensor, y: torch.Tensor, kappa: float = 0.0) -> torch.Tensor:
    """``max(z_y - max_{c != y} z_c, -kappa)``; non-positive once misclassified."""
    z_y = logits.gather(1, y.unsqueeze(1)).squeeze(1)
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf"))
    return torch.clamp(z_y - other.max(1).values, min=-kappa)


def attack_objective(
    model, x: torch.Tensor, target: torch.Tensor, objective: str, tau_student: float = 1.0, kappa: float = 0.0
) -> torch.Tensor:
    """Per-sample quantity the attacker ascends.

    ``ce``: cross-entropy against integer labels. ``kl``: KL between the fixed
    soft targets and the model's output at ``tau_student``. ``cw``: the
    negated CW margin.
    """
    logits = model(x)
    if objective == "ce":
        return F.cross_entropy(logits, target, reduction="none")
    if objective == "kl":
        return kl_div_from_logits(F.log_softmax(logits / tau_student, dim=1), target)
    if objective == "cw":
        return -cw_margin(logits, target, kappa)
    raise ValueError(f"unknown objective {objective!r}")


def input_gradient(model, x, target, objective, tau_student=1.0, kappa=0.0) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        value = attack_objective(model, x, target, objective, tau_student, kappa).sum()
        (grad,) = torch.autograd.grad(value, x)
    if not torch.isfinite(grad).all():
        bad = (~torch.isfinite(grad)).flatten(1).any(1).nonzero().flatten().tolist()
        raise AttackError(f"non-finite input gradient for samples {bad[:10]} (objective={objective})")
    return grad


def project(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    x_adv = torch.min(torch.max(x_adv, x - epsilon), x + epsilon)
    return x_adv.clamp(0.0, 1.0)


def pgd(
    model,
    x: torch.Tensor,
    target: torch.Tensor,
    cfg: AttackConfig,
    generator: torch.Generator | None = None,
    tau_student: float = 1.0,
) -> AdversarialBatch:
    """Projected sign-gradient ascent on ``cfg.objective`` inside the eps-ball.

    The model is switched to eval mode for the duration and restored after;
    gradients are taken with respect to the input only.
    """
    was_training = model.training
    model.eval()
    try:
        x = x.detach()
        x_adv = x.clone()
        if cfg.random_start_scale > 0:
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype)
            x_adv = x_adv + (2 * noise - 1) * cfg.random_start_scale
            x_adv = project(x_adv, x, cfg.epsilon)
        for _ in range(cfg.steps):
            grad = input_gradient(model, x_adv, target, cfg.objective, tau_student, cfg.kappa)
            x_adv = project(x_adv + cfg.step_size * grad.sign(), x, cfg.epsilon)
        with torch.no_grad():
            value = attack_objective(model, x_adv, target, cfg.objective, tau_student, cfg.kappa)
    finally:
        model.train(was_training)
    return AdversarialBatch(x_adv.detach(), value.detach())


def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon: float) -> AdversarialBatch:
    """Single signed-gradient step of size ``epsilon`` on the cross-entropy."""
    was_training = model.training
    model.eval()
    try:
        x = x.detach()
        if epsilon == 0:
            x_adv = x.clone()
        else:
            grad = input_gradient(model, x, y, "ce")
            x_adv = project(x + epsilon * grad.sign(), x, epsilon)
        with torch.no_grad():
            value = F.cross_entropy(model(x_adv), y, reduction="none")
    finally:
        model.train(was_training)
    return AdversarialBatch(x_adv, value)


def cw_inf(model, x, y, cfg: AttackConfig = CW30, generator=None) -> AdversarialBatch:
    if cfg.objective != "cw":
        cfg = AttackConfig(**{**cfg.__dict__, "objective": "cw"})
    return pgd(model, x, y, cfg, generator)


def kl_inner_max(
    student,
    teacher_soft_labels: torch.Tensor,
    x: torch.Tensor,
    cfg: AttackConfig = PGD10_TRAIN,
    generator=None,
    tau_student: float = 1.0,
) -> AdversarialBatch:
    """Adversarial examples maximizing the student's KL to fixed teacher targets."""
    if cfg.objective != "kl":
        cfg = AttackConfig(**{**cfg.__dict__, "objective": "kl"})
    return pgd(student, x, teacher_soft_labels.detach(), cfg, generator, tau_student)


EVAL_ATTACKS = ("clean", "fgsm", "pgd20", "cw30")


def eval_attack_configs(epsilon: float = 8 / 255, step_size: float = 2 / 255) -> dict:
    """Default evaluation suite at a given budget; ``clean`` maps to None."""
    return {
        "clean": None,
        "fgsm": AttackConfig(epsilon=epsilon, step_size=epsilon, steps=1, random_start_scale=0.0),
        "pgd20": AttackConfig(epsilon=epsilon, step_size=step_size, steps=20, objective="ce"),
        "cw30": AttackConfig(epsilon=epsilon, step_size=step_size, steps=30, objective="cw"),
    }


def run_attack(name: str, model, x, y, cfg: AttackConfig | None = None, generator=None) -> torch.Tensor:
    """Inputs to classify under the named evaluation attack (clean, fgsm, pgd20, cw30)."""
    if name == "clean":
        return x
    if cfg is None:
        cfg = eval_attack_configs()[name]
    if name == "fgsm":
        return fgsm(model, x, y, cfg.epsilon).x_adv
    if name == "pgd20":
        return pgd(model, x, y, cfg, generator).x_adv
    if name == "cw30":
        return cw_inf(model, x, y, cfg, generator).x_adv
    raise ValueError(f"unknown attack {name!r}")
