"""Numerically safe probability primitives.

Everything here operates on torch tensors whose last dimension indexes
classes. Plain sequences and numpy arrays are accepted and converted to
float64 tensors, which is the path the metric and oracle code uses.

KL convention used throughout the package::

    kl_div(prediction, target) = sum_c target_c * log(target_c / prediction_c)

i.e. the second argument is the distribution being matched (teacher soft
label, smoothed label), the first is the model output.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

EPS = 1e-12


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=dtype)


def smooth_label(y: int, gamma: float, num_classes: int) -> torch.Tensor:
    """Smoothed one-hot label: ``1 - gamma`` on ``y``, ``gamma / (C - 1)`` elsewhere."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if not 0 <= y < num_classes:
        raise ValueError(f"class index {y} out of range for {num_classes} classes")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"smoothing coefficient must lie in [0, 1), got {gamma}")
    out = torch.full((num_classes,), gamma / (num_classes - 1), dtype=torch.float64)
    out[y] = 1.0 - gamma
    return out


def smooth_labels(y: torch.Tensor, gammas, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Batched :func:`smooth_label` with a per-class smoothing coefficient.

    ``gammas`` is either a scalar or a length-C vector indexed by the label.
    """
    y = torch.as_tensor(y, dtype=torch.long)
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if y.numel() and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError("class index out of range")
    g = torch.as_tensor(gammas, dtype=torch.float64)
    if g.ndim == 0:
        g = g.expand(num_classes)
    if g.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} smoothing coefficients, got {tuple(g.shape)}")
    if (g < 0).any() or (g >= 1).any():
        raise ValueError("smoothing coefficients must lie in [0, 1)")
    g_y = g[y].unsqueeze(-1)
    out = (g_y / (num_classes - 1)).expand(-1, num_classes).clone()
    out.scatter_(1, y.unsqueeze(1), 1.0 - g_y)
    return out.to(dtype)


def _check_tau(tau) -> None:
    if isinstance(tau, torch.Tensor):
        if (tau <= 0).any():
            raise ValueError("temperature must be positive")
    elif not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def temp_softmax(z, tau=1.0) -> torch.Tensor:
    """Softmax of ``z / tau`` over the last dimension.

    ``tau`` may be a scalar or a tensor broadcastable against ``z`` (a
    per-sample column of temperatures, for instance).
    """
    z = as_tensor(z)
    _check_tau(tau)
    return F.softmax(z / tau, dim=-1)


def log_temp_softmax(z, tau=1.0) -> torch.Tensor:
    z = as_tensor(z)
    _check_tau(tau)
    return F.log_softmax(z / tau, dim=-1)


def kl_div(p, q, eps: float = EPS) -> torch.Tensor:
    """KL(q || p) with ``p`` the prediction and ``q`` the target.

    Zero target entries contribute nothing; zero prediction entries are
    clamped to ``eps`` before the log. Reduces over the last dimension.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    terms = q * (torch.log(q.clamp_min(eps)) - torch.log(p.clamp_min(eps)))
    return torch.where(q > 0, terms, torch.zeros_like(terms)).sum(-1)


def kl_div_from_logits(log_p: torch.Tensor, q: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Same as :func:`kl_div` but with the prediction given as log-probabilities.

    This is the form used on training paths, where the student's
    log-softmax is available and exact.
    """
    if log_p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(log_p.shape)} vs {tuple(q.shape)}")
    terms = q * (torch.log(q.clamp_min(eps)) - log_p)
    return torch.where(q > 0, terms, torch.zeros_like(terms)).sum(-1)


def cross_entropy(p, y, eps: float = EPS) -> torch.Tensor:
    """``-log p[y]`` with the probability clamped at ``eps``.

    ``p`` may be a single vector with integer ``y`` or a batch with a label
    tensor; the result has the batch shape.
    """
    p = as_tensor(p)
    y = torch.as_tensor(y, dtype=torch.long)
    num_classes = p.shape[-1]
    if y.numel() and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"class index out of range for {num_classes} classes")
    picked = p.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(eps))


def soft_cross_entropy(log_p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return -(q * log_p).sum(-1)


def entropy(p, eps: float = EPS) -> torch.Tensor:
    p = as_tensor(p)
    return -(p * torch.log(p.clamp_min(eps))).sum(-1)


def max_ce(eps: float = EPS) -> float:
    """Largest value :func:`cross_entropy` can return under the clamp."""
    return -math.log(eps)
