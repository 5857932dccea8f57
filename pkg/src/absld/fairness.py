"""Per-class error risk accumulation and class-wise fairness metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateEpochError(RuntimeError):
    """Raised when some class received no samples during an epoch."""


class UndefinedMetricError(ArithmeticError):
    """Raised when a normalized metric has a zero denominator."""


BRANCHES = ("clean", "adv")


def _check_branch(branch: str) -> None:
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")


@dataclass
class ClassRiskAccumulator:
    """Running per-class cross-entropy sums for the clean and adversarial branch."""

    num_classes: int
    epoch: int = 0
    ce_sum_clean: np.ndarray = field(default=None)
    ce_sum_adv: np.ndarray = field(default=None)
    count: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.ce_sum_clean is None:
            self.reset(self.epoch)

    def reset(self, epoch: int | None = None) -> None:
        if epoch is not None:
            self.epoch = epoch
        self.ce_sum_clean = np.zeros(self.num_classes, dtype=np.float64)
        self.ce_sum_adv = np.zeros(self.num_classes, dtype=np.float64)
        self.count = np.zeros(self.num_classes, dtype=np.int64)

    def accumulate(self, y: int, ce_clean: float, ce_adv: float) -> "ClassRiskAccumulator":
        if not 0 <= y < self.num_classes:
            raise ValueError(f"class index {y} out of range")
        if not (math.isfinite(ce_clean) and math.isfinite(ce_adv)):
            raise ValueError("cross-entropy values must be finite")
        if ce_clean < 0 or ce_adv < 0:
            raise ValueError("cross-entropy values must be non-negative")
        self.ce_sum_clean[y] += ce_clean
        self.ce_sum_adv[y] += ce_adv
        self.count[y] += 1
        return self

    def accumulate_batch(self, y, ce_clean, ce_adv) -> "ClassRiskAccumulator":
        """Vectorised :meth:`accumulate` for one minibatch.

        Sums are added in sample order per class so the result matches a
        loop over :meth:`accumulate` up to float rounding.
        """
        y = np.asarray(y, dtype=np.int64)
        ce_clean = np.asarray(ce_clean, dtype=np.float64)
        ce_adv = np.asarray(ce_adv, dtype=np.float64)
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("class index out of range")
        if not (np.isfinite(ce_clean).all() and np.isfinite(ce_adv).all()):
            raise ValueError("cross-entropy values must be finite")
        np.add.at(self.ce_sum_clean, y, ce_clean)
        np.add.at(self.ce_sum_adv, y, ce_adv)
        np.add.at(self.count, y, 1)
        return self

    def merge(self, other: "ClassRiskAccumulator") -> "ClassRiskAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        self.ce_sum_clean += other.ce_sum_clean
        self.ce_sum_adv += other.ce_sum_adv
        self.count += other.count
        return self

    def class_risks(self, branch: str) -> np.ndarray:
        return class_risks(self, branch)


def class_risks(acc: ClassRiskAccumulator, branch: str) -> np.ndarray:
    """Per-class mean cross-entropy for ``branch`` ('clean' or 'adv')."""
    _check_branch(branch)
    missing = np.flatnonzero(acc.count == 0)
    if missing.size:
        raise DegenerateEpochError(
            f"epoch {acc.epoch}: no samples seen for classes {missing.tolist()}"
        )
    sums = acc.ce_sum_clean if branch == "clean" else acc.ce_sum_adv
    return sums / acc.count


def _population_sd(v: np.ndarray) -> float:
    return float(np.std(v, ddof=0))


def nsd(per_class) -> float:
    """Population standard deviation divided by the mean."""
    v = np.asarray(per_class, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty vector")
    mean = float(v.mean())
    if mean <= 0:
        raise UndefinedMetricError("NSD is undefined for a non-positive mean")
    return _population_sd(v) / mean


def normalized_risk_sd(acc: ClassRiskAccumulator, branch: str) -> float:
    """Spread of class risks relative to their mean (scale invariant)."""
    return nsd(class_risks(acc, branch))


@dataclass(frozen=True)
class FairnessReport:
    per_class_acc: tuple
    average: float
    worst: float
    worst_q: float
    sd: float
    nsd: float | None  # None when the average is zero
    q: float = 0.1

    @property
    def num_classes(self) -> int:
        return len(self.per_class_acc)

    def nsd_str(self, digits: int = 4) -> str:
        return "-" if self.nsd is None else f"{self.nsd:.{digits}f}"

    def to_record(self, prefix: str = "") -> dict:
        rec = {
            f"{prefix}average": self.average,
            f"{prefix}worst": self.worst,
            f"{prefix}worst_q": self.worst_q,
            f"{prefix}sd": self.sd,
            f"{prefix}nsd": self.nsd,
        }
        for k, a in enumerate(self.per_class_acc):
            rec[f"{prefix}class_{k}"] = a
        return rec


def worst_fraction_count(num_classes: int, q: float) -> int:
    return max(1, math.ceil(q * num_classes - 1e-9))


def fairness_report(per_class_acc, q: float = 0.1) -> FairnessReport:
    """Average, worst-class, worst-q tail mean, SD and NSD of class accuracies."""
    v = np.asarray(per_class_acc, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("per-class accuracy must be a non-empty vector")
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    k = worst_fraction_count(v.size, q)
    tail = np.sort(v)[:k]
    average = float(v.mean())
    try:
        n = nsd(v)
    except UndefinedMetricError:
        n = None
    return FairnessReport(
        per_class_acc=tuple(float(a) for a in v),
        average=average,
        worst=float(v.min()),
        worst_q=float(tail.mean()),
        sd=_population_sd(v),
        nsd=n,
        q=q,
    )


def per_class_accuracy(pred, y, num_classes: int) -> np.ndarray:
    """Fraction of correct predictions within each class."""
    pred = np.asarray(pred)
    y = np.asarray(y)
    correct = np.bincount(y, weights=(pred == y).astype(np.float64), minlength=num_classes)
    total = np.bincount(y, minlength=num_classes)
    if (total == 0).any():
        raise ValueError(f"classes without samples: {np.flatnonzero(total == 0).tolist()}")
    return correct / total
