"""Per-class teacher temperatures and their risk-driven update."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
import torch

from .core_math import temp_softmax
from .fairness import BRANCHES


class SchedulerMode(str, enum.Enum):
    ADAPTIVE = "adaptive"
    MANUAL = "manual-static"
    FIXED = "fixed"


@dataclass(frozen=True)
class ClassTemperatures:
    """Teacher temperatures for clean (``tau_clean``) and adversarial (``tau_adv``) targets."""

    tau_clean: np.ndarray
    tau_adv: np.ndarray
    beta: float = 0.1
    tau_min: float = 0.5
    tau_max: float = 5.0
    tau_student: float = 1.0

    def __post_init__(self):
        clean = np.asarray(self.tau_clean, dtype=np.float64).copy()
        adv = np.asarray(self.tau_adv, dtype=np.float64).copy()
        clean.setflags(write=False)
        adv.setflags(write=False)
        object.__setattr__(self, "tau_clean", clean)
        object.__setattr__(self, "tau_adv", adv)
        if clean.shape != adv.shape or clean.ndim != 1:
            raise ValueError("temperature vectors must be 1-D and of equal length")
        if not 0 < self.tau_min <= self.tau_max:
            raise ValueError(f"need 0 < tau_min <= tau_max, got [{self.tau_min}, {self.tau_max}]")
        if self.beta <= 0 or self.tau_student <= 0:
            raise ValueError("beta and tau_student must be positive")
        for v in (clean, adv):
            if (v < self.tau_min - 1e-12).any() or (v > self.tau_max + 1e-12).any():
                raise ValueError(
                    f"temperatures must lie in [{self.tau_min}, {self.tau_max}], got {v.tolist()}"
                )

    @classmethod
    def uniform(cls, num_classes: int, tau: float = 1.0, **kwargs) -> "ClassTemperatures":
        v = np.full(num_classes, tau, dtype=np.float64)
        return cls(tau_clean=v, tau_adv=v, **kwargs)

    @classmethod
    def from_table(cls, table, **kwargs) -> "ClassTemperatures":
        """Static per-class table used for both branches (manual mode)."""
        v = np.asarray(table, dtype=np.float64)
        return cls(tau_clean=v, tau_adv=v, **kwargs)

    @property
    def num_classes(self) -> int:
        return self.tau_clean.size

    def branch(self, name: str) -> np.ndarray:
        if name not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {name!r}")
        return self.tau_clean if name == "clean" else self.tau_adv

    def to_dict(self) -> dict:
        return {
            "tau_clean": self.tau_clean.tolist(),
            "tau_adv": self.tau_adv.tolist(),
            "beta": self.beta,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "tau_student": self.tau_student,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTemperatures":
        return cls(**d)


def temperature_deltas(risks, beta: float) -> np.ndarray | None:
    """Unclamped additive change for one branch, or None when all risks are equal.

    Classes riskier than average get a negative delta (sharper targets); the
    class farthest from the mean moves by exactly ``beta``.
    """
    r = np.asarray(risks, dtype=np.float64)
    if not np.isfinite(r).all():
        raise ValueError(f"class risks must be finite, got {r.tolist()}")
    dev = r - r.mean()
    scale = np.abs(dev).max()
    # equal risks can leave rounding-level deviations from the mean; treat as equal
    if np.ptp(r) == 0.0 or scale <= 8 * np.finfo(np.float64).eps * np.abs(r).max():
        return None
    return -beta * dev / scale


def update_temperatures(
    temps: ClassTemperatures,
    risks_adv,
    risks_clean,
    branches=BRANCHES,
) -> ClassTemperatures:
    """One epoch of the temperature rule, applied independently per branch.

    ``branches`` restricts which vectors move; the adversarial-only
    ablation passes ``("adv",)``.
    """
    new = {}
    for name, risks in (("clean", risks_clean), ("adv", risks_adv)):
        tau = temps.branch(name)
        if name not in branches:
            continue
        if len(risks) != temps.num_classes:
            raise ValueError(f"{name} risks have length {len(risks)}, expected {temps.num_classes}")
        delta = temperature_deltas(risks, temps.beta)
        if delta is None:
            continue
        new[f"tau_{name}"] = np.clip(tau + delta, temps.tau_min, temps.tau_max)
    return replace(temps, **new) if new else temps


def teacher_soft_labels(
    teacher_logits: torch.Tensor,
    y: torch.Tensor,
    temps: ClassTemperatures,
    branch: str,
) -> torch.Tensor:
    """Teacher distribution at the temperature assigned to each sample's label."""
    tau = torch.tensor(temps.branch(branch), dtype=teacher_logits.dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    if teacher_logits.ndim == 1:
        return temp_softmax(teacher_logits, float(tau[int(y)]))
    return temp_softmax(teacher_logits, tau[y].unsqueeze(-1))

