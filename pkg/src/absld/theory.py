"""Desk-scale checks of the smoothness/fairness claims.

Three experiments, all with paired seeds:

* same vs different smoothing coefficients per class under label-smoothed
  adversarial training (``run_ssd_vs_dsd``),
* the student's hard/easy risk gap as a function of static per-class
  teacher temperatures (``run_temperature_monotonicity``),
* a static hand-set temperature table against the adaptive scheduler
  (``run_manual_vs_adaptive``).

Every claim checked here is ordinal, so results are summarized with medians,
sign counts and Spearman rank correlations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from . import attacks as atk
from .data import Dataset, SyntheticTaskSpec, load_image_subset, make_synthetic
from .fairness import FairnessReport, fairness_report, per_class_accuracy
from .models import ModelSpec, build_model, freeze
from .trainer import (
    SchedulerConfig,
    TrainingConfig,
    derive_seed,
    evaluate,
    init_model,
    load_weights,
    select_checkpoint,
    train,
)

log = logging.getLogger(__name__)

SSD_GAMMA = 0.2
DSD_GAMMA_HARD = 0.05
DSD_GAMMA_EASY = 0.35


class PreconditionError(RuntimeError):
    """The teacher does not predict every class correctly more often than not."""


@dataclass(frozen=True)
class SmoothnessAssignment:
    gammas: tuple
    designation: str  # "SSD" or "DSD"

    def __post_init__(self):
        g = tuple(float(v) for v in self.gammas)
        object.__setattr__(self, "gammas", g)
        if any(not 0 <= v < 1 for v in g):
            raise ValueError("smoothing coefficients must lie in [0, 1)")
        if self.designation not in ("SSD", "DSD"):
            raise ValueError("designation must be SSD or DSD")
        if self.designation == "SSD" and len(set(g)) != 1:
            raise ValueError("SSD uses one smoothing coefficient for every class")

    @classmethod
    def ssd(cls, num_classes: int, gamma: float = SSD_GAMMA) -> "SmoothnessAssignment":
        return cls((gamma,) * num_classes, "SSD")

    @classmethod
    def dsd(cls, hard, num_classes: int, gamma_hard=DSD_GAMMA_HARD, gamma_easy=DSD_GAMMA_EASY) -> "SmoothnessAssignment":
        if not gamma_hard < gamma_easy:
            raise ValueError("hard classes need sharper labels than easy ones")
        hard = set(int(h) for h in hard)
        return cls(tuple(gamma_hard if c in hard else gamma_easy for c in range(num_classes)), "DSD")


@dataclass
class TheoryTask:
    """Datasets, architectures and a training template shared by every run."""

    name: str
    train_set: Dataset
    test_set: Dataset
    student: ModelSpec
    teacher: ModelSpec
    base: TrainingConfig
    hard: tuple = ()

    @property
    def num_classes(self) -> int:
        return self.train_set.num_classes

    @property
    def easy(self) -> tuple:
        return tuple(c for c in range(self.num_classes) if c not in self.hard)


@dataclass
class GapMeasurement:
    seed: int
    gap: float
    worst: float
    average: float
    per_class_acc: tuple
    per_class_risk: tuple
    hard_riskier: bool
    epoch: int = 0

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "gap": self.gap,
            "worst": self.worst,
            "average": self.average,
            "hard_riskier": self.hard_riskier,
            "epoch": self.epoch,
            **{f"acc_{k}": a for k, a in enumerate(self.per_class_acc)},
            **{f"risk_{k}": r for k, r in enumerate(self.per_class_risk)},
        }


# ---------------------------------------------------------------------------
# task construction

def fraction_milestones(epochs: int, fractions=(0.7, 0.87)) -> tuple:
    """LR drop epochs at fixed fractions of a run, deduplicated and kept inside (0, epochs)."""
    return tuple(sorted({int(epochs * f) for f in fractions if 0 < int(epochs * f) < epochs}))


SYNTHETIC_DEFAULT = dict(
    means=[[0.3, 0.3], [0.7, 0.7]],
    scales=[0.3, 0.05],
    samples_per_class=500,
)


def synthetic_task(spec: SyntheticTaskSpec | None = None, data_seed: int = 0, epochs: int = 15,
                   epsilon: float = 0.05) -> TheoryTask:
    """Two Gaussian classes: a wide hard class next to a tight easy one."""
    spec = spec or SyntheticTaskSpec(**SYNTHETIC_DEFAULT)
    dim = spec.dim
    base = TrainingConfig(
        max_epochs=epochs,
        lr=0.05,
        lr_milestones=fraction_milestones(epochs),
        batch_size=64,
        loss="sat-smooth",
        smoothing=(SSD_GAMMA,) * spec.num_classes,
        attack_train=atk.AttackConfig(epsilon=epsilon, step_size=epsilon / 4, steps=10, objective="kl"),
        attack_eval=atk.eval_attack_configs(epsilon, epsilon / 4),
        eval_attacks=("pgd20",),
    )
    return TheoryTask(
        name="synthetic",
        train_set=make_synthetic(spec, data_seed, "train"),
        test_set=make_synthetic(spec, data_seed, "test"),
        student=ModelSpec("mlp", (32,), spec.num_classes, (dim,)),
        teacher=ModelSpec("mlp", (64, 64), spec.num_classes, (dim,)),
        base=base,
    )


def mnist_task(per_class: int = 200, test_per_class: int = 100, epochs: int = 15, epsilon: float = 0.1,
               root=None) -> TheoryTask:
    base = TrainingConfig(
        max_epochs=epochs,
        lr=0.05,
        lr_milestones=fraction_milestones(epochs),
        batch_size=100,
        loss="sat-smooth",
        smoothing=(SSD_GAMMA,) * 10,
        attack_train=atk.AttackConfig(epsilon=epsilon, step_size=epsilon / 4, steps=10, objective="kl"),
        attack_eval=atk.eval_attack_configs(epsilon, epsilon / 4),
        eval_attacks=("pgd20",),
    )
    return TheoryTask(
        name="mnist",
        train_set=load_image_subset("mnist", per_class, "train", root),
        test_set=load_image_subset("mnist", test_per_class, "test", root),
        student=ModelSpec("mlp", (128,), 10, (1, 28, 28)),
        teacher=ModelSpec("mlp", (256, 256), 10, (1, 28, 28)),
        base=base,
    )


# ---------------------------------------------------------------------------
# measurement helpers


def adversarial_class_risk(model, data: Dataset, cfg: atk.AttackConfig, seed: int) -> np.ndarray:
    """Per-class mean cross-entropy on held-out PGD examples."""
    gen = torch.Generator().manual_seed(derive_seed(seed, 77))
    x_adv = atk.pgd(model, data.x, data.y, cfg, gen).x_adv
    with torch.no_grad():
        ce = F.cross_entropy(model(x_adv), data.y, reduction="none").double().numpy()
    y = data.y.numpy()
    return np.bincount(y, weights=ce, minlength=data.num_classes) / np.bincount(y, minlength=data.num_classes)


def measure(task: TheoryTask, model, seed: int, epoch: int = 0) -> GapMeasurement:
    pgd_cfg = task.base.attack_eval["pgd20"]
    rep = evaluate(model, task.test_set, ("pgd20",), task.base.attack_eval, seed=seed)["pgd20"]
    risk = adversarial_class_risk(model, task.test_set, pgd_cfg, seed)
    hard, easy = list(task.hard), list(task.easy)
    gap = float(risk[hard].mean() - risk[easy].mean())
    return GapMeasurement(
        seed=seed,
        gap=gap,
        worst=rep.worst,
        average=rep.average,
        per_class_acc=rep.per_class_acc,
        per_class_risk=tuple(risk.tolist()),
        hard_riskier=gap > 0,
        epoch=epoch,
    )


def _train_student(task: TheoryTask, cfg: TrainingConfig, teacher=None, final: bool = False):
    student = init_model(lambda: build_model(task.student), cfg.seed)
    history = train(cfg, student, teacher, task.train_set, task.test_set)
    best = history[-1] if final else select_checkpoint(history)
    return load_weights(student, best), best, history


def designate_hard_classes(task: TheoryTask, seed: int = 1000) -> tuple:
    """Hard classes from a baseline (uniform smoothing) run's held-out PGD error.

    With two classes the single class of highest error is hard; with more,
    every class whose error exceeds the mean error. Ties go to the lower
    class index. The designation seed is kept apart from experiment seeds.
    """
    cfg = replace(task.base, seed=seed, loss="sat-smooth", smoothing=(SSD_GAMMA,) * task.num_classes)
    model, best, _ = _train_student(task, cfg)
    err = 1.0 - np.asarray(best.record["eval"]["pgd20"]["per_class"])
    if task.num_classes == 2:
        hard = (int(np.argmax(err)),)
    else:
        hard = tuple(int(c) for c in np.flatnonzero(err > err.mean()))
    task.hard = hard
    log.info("%s: hard classes %s (baseline PGD error %s)", task.name, hard, np.round(err, 3).tolist())
    return hard


# ---------------------------------------------------------------------------
# experiments


@dataclass
class PairedGap:
    seed: int
    ssd: GapMeasurement
    dsd: GapMeasurement


@dataclass
class SsdDsdResult:
    task: str
    hard: tuple
    pairs: list

    def median(self, arm: str, key: str) -> float:
        return float(np.median([getattr(getattr(p, arm), key) for p in self.pairs]))

    @property
    def seeds(self) -> list:
        return [p.seed for p in self.pairs]

    def conditioned_pairs(self) -> list:
        """Pairs satisfying the conditional hypothesis (hard class still riskier under DSD)."""
        return [p for p in self.pairs if p.dsd.hard_riskier]

    def summary(self) -> dict:
        kept = self.conditioned_pairs()
        return {
            "task": self.task,
            "hard": list(self.hard),
            "seeds": self.seeds,
            "median_worst_ssd": self.median("ssd", "worst"),
            "median_worst_dsd": self.median("dsd", "worst"),
            "median_avg_ssd": self.median("ssd", "average"),
            "median_avg_dsd": self.median("dsd", "average"),
            "median_gap_ssd": self.median("ssd", "gap"),
            "median_gap_dsd": self.median("dsd", "gap"),
            "conditioned_pairs": len(kept),
            "gap_reduced_in": sum(p.dsd.gap < p.ssd.gap for p in kept),
        }


def run_ssd_vs_dsd(task: TheoryTask, ssd: SmoothnessAssignment, dsd: SmoothnessAssignment, seeds) -> SsdDsdResult:
    """Paired label-smoothed adversarial training under two smoothing assignments."""
    if len(ssd.gammas) != task.num_classes or len(dsd.gammas) != task.num_classes:
        raise ValueError("assignments must have one coefficient per class")
    pairs = []
    for seed in seeds:
        arms = []
        for assignment in (ssd, dsd):
            cfg = replace(task.base, seed=seed, loss="sat-smooth", smoothing=assignment.gammas)
            model, best, _ = _train_student(task, cfg)
            arms.append(measure(task, model, seed, best.epoch))
        pairs.append(PairedGap(seed, *arms))
        log.info("seed %d: SSD worst %.3f avg %.3f | DSD worst %.3f avg %.3f", seed,
                 arms[0].worst, arms[0].average, arms[1].worst, arms[1].average)
    return SsdDsdResult(task.name, tuple(task.hard), pairs)


def pretrain_teacher(task: TheoryTask, seed: int = 2000, epochs: int | None = None, lambda_trades: float = 6.0):
    """TRADES-trained frozen teacher for the distillation experiments."""
    epochs = epochs or task.base.max_epochs
    cfg = replace(
        task.base,
        seed=seed,
        loss="trades",
        trades_lambda=lambda_trades,
        max_epochs=epochs,
        lr_milestones=fraction_milestones(epochs),
    )
    teacher = init_model(lambda: build_model(task.teacher), seed)
    history = train(cfg, teacher, None, task.train_set, task.test_set)
    return freeze(load_weights(teacher, history[-1]))


def check_teacher(teacher, task: TheoryTask) -> np.ndarray:
    """Per-class clean accuracy of the teacher; every class must exceed 50%."""
    with torch.no_grad():
        pred = teacher(task.test_set.x).argmax(1).numpy()
    acc = per_class_accuracy(pred, task.test_set.y.numpy(), task.num_classes)
    log.info("teacher per-class clean accuracy %s", np.round(acc, 3).tolist())
    if (acc <= 0.5).any():
        raise PreconditionError(
            f"teacher is not correct on every class (per-class accuracy {np.round(acc, 3).tolist()})"
        )
    return acc


def manual_table(task: TheoryTask, tau_hard: float, tau_easy: float) -> tuple:
    return tuple(tau_hard if c in task.hard else tau_easy for c in range(task.num_classes))


def _distill(task, teacher, seed, table=None, mode="manual-static", alpha=0.9, epochs=None, final=False):
    sched = SchedulerConfig(mode=mode, manual_table=table)
    cfg = replace(task.base, seed=seed, loss="absld", alpha=alpha, scheduler=sched,
                  max_epochs=epochs or task.base.max_epochs)
    cfg = replace(cfg, lr_milestones=tuple(m for m in task.base.lr_milestones if m < cfg.max_epochs))
    return _train_student(task, cfg, teacher, final)


@dataclass
class GapSurface:
    tau_hard_grid: tuple
    tau_easy_grid: tuple
    gaps: dict  # (tau_hard, tau_easy) -> list of per-seed gaps
    seeds: tuple
    teacher_acc: tuple = ()

    def mean_gap(self, tau_hard: float, tau_easy: float) -> float:
        return float(np.mean(self.gaps[(tau_hard, tau_easy)]))

    def spearman_per_seed(self, axis: str) -> list:
        """Rank correlation of the gap with the varied temperature, one value per seed."""
        out = []
        for i in range(len(self.seeds)):
            if axis == "hard":
                xs = list(self.tau_hard_grid)
                ys = [self.gaps[(t, 1.0)][i] for t in xs]
            else:
                xs = list(self.tau_easy_grid)
                ys = [self.gaps[(1.0, t)][i] for t in xs]
            rho = spearmanr(xs, ys).statistic
            out.append(float(rho))
        return out

    def rows(self) -> list:
        return [
            {"tau_hard": th, "tau_easy": te, "mean_gap": float(np.mean(v)),
             **{f"gap_seed_{s}": g for s, g in zip(self.seeds, v)}}
            for (th, te), v in sorted(self.gaps.items())
        ]


def run_temperature_monotonicity(task: TheoryTask, teacher, tau_hard_grid=(0.5, 1.0, 2.0),
                                 tau_easy_grid=(0.5, 1.0, 2.0), seeds=range(5), alpha: float = 0.9) -> GapSurface:
    """Final student risk gap over two one-dimensional temperature sweeps through (1, 1)."""
    if not tau_hard_grid or not tau_easy_grid:
        raise ValueError("temperature grids must be non-empty")
    if not task.hard:
        raise ValueError("designate hard classes first")
    teacher_acc = check_teacher(teacher, task)
    points = sorted({(t, 1.0) for t in tau_hard_grid} | {(1.0, t) for t in tau_easy_grid})
    gaps = {p: [] for p in points}
    seeds = tuple(seeds)
    for seed in seeds:
        for th, te in points:
            model, best, _ = _distill(task, teacher, seed, manual_table(task, th, te), alpha=alpha, final=True)
            gaps[(th, te)].append(measure(task, model, seed, best.epoch).gap)
        log.info("seed %d gaps %s", seed, {p: round(v[-1], 4) for p, v in gaps.items()})
    return GapSurface(tuple(tau_hard_grid), tuple(tau_easy_grid), gaps, seeds, tuple(teacher_acc.tolist()))


@dataclass
class ManualAdaptiveComparison:
    seeds: tuple
    manual: list = field(default_factory=list)   # FairnessReport per seed
    adaptive: list = field(default_factory=list)

    def adaptive_wins(self) -> int:
        return sum(
            (a.nsd if a.nsd is not None else np.inf) <= (m.nsd if m.nsd is not None else np.inf)
            for a, m in zip(self.adaptive, self.manual)
        )

    def rows(self) -> list:
        rows = []
        for seed, m, a in zip(self.seeds, self.manual, self.adaptive):
            for arm, rep in (("manual", m), ("adaptive", a)):
                rows.append({"seed": seed, "arm": arm, **rep.to_record()})
        return rows


def run_manual_vs_adaptive(task: TheoryTask, teacher, table, seeds=range(5), alpha: float = 0.9) -> ManualAdaptiveComparison:
    """Static per-class temperatures against the adaptive scheduler under the same budget."""
    check_teacher(teacher, task)
    out = ManualAdaptiveComparison(tuple(seeds))
    for seed in out.seeds:
        for arm, mode, tbl in (("manual", "manual-static", tuple(table)), ("adaptive", "adaptive", None)):
            model, best, _ = _distill(task, teacher, seed, tbl, mode=mode, alpha=alpha)
            rep = evaluate(model, task.test_set, ("pgd20",), task.base.attack_eval, seed=seed)["pgd20"]
            getattr(out, arm).append(rep)
    return out
