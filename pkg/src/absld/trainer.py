"""Epoch loop for distillation and adversarial training, evaluation and checkpoint selection."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import attacks as atk
from .core_math import smooth_labels
from .data import Dataset, stratified_batches
from .fairness import ClassRiskAccumulator, FairnessReport, fairness_report, per_class_accuracy
from .losses import LOSSES, LossTerms, absld_loss_terms, rslad_loss_terms, sat_loss, soft_label_loss, trades_loss_terms
from .models import freeze
from .temperature import ClassTemperatures, SchedulerMode, teacher_soft_labels, update_temperatures

log = logging.getLogger(__name__)

FULL_SCHEDULE_EPOCHS = 300
FULL_SCHEDULE_MILESTONES = (215, 260, 285)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class SchedulerConfig:
    mode: str = "adaptive"
    beta: float = 0.1
    tau_init: float = 1.0
    tau_min: float = 0.5
    tau_max: float = 5.0
    tau_student: float = 1.0
    manual_table: tuple | None = None
    branches: tuple = ("clean", "adv")

    def __post_init__(self):
        mode = SchedulerMode(self.mode).value
        object.__setattr__(self, "mode", mode)
        if self.manual_table is not None:
            object.__setattr__(self, "manual_table", tuple(float(t) for t in self.manual_table))
        object.__setattr__(self, "branches", tuple(self.branches))
        if mode == SchedulerMode.MANUAL.value and self.manual_table is None:
            raise ValueError("manual-static mode requires a per-class temperature table")
        if not set(self.branches) <= {"clean", "adv"}:
            raise ValueError(f"branches must be a subset of ('clean', 'adv'), got {self.branches}")

    def initial(self, num_classes: int) -> ClassTemperatures:
        bounds = dict(beta=self.beta, tau_min=self.tau_min, tau_max=self.tau_max, tau_student=self.tau_student)
        if self.mode == SchedulerMode.MANUAL.value:
            if len(self.manual_table) != num_classes:
                raise ValueError(f"manual table has {len(self.manual_table)} entries for {num_classes} classes")
            lo = min(self.tau_min, *self.manual_table)
            hi = max(self.tau_max, *self.manual_table)
            return ClassTemperatures.from_table(self.manual_table, **{**bounds, "tau_min": lo, "tau_max": hi})
        tau = 1.0 if self.mode == SchedulerMode.FIXED.value else self.tau_init
        return ClassTemperatures.uniform(num_classes, tau, **bounds)


@dataclass(frozen=True)
class TrainingConfig:
    max_epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_milestones: tuple = (21, 26, 28)
    lr_divisor: float = 10.0
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 1
    loss: str = "absld"
    alpha: float = 0.9
    trades_lambda: float = 6.0
    smoothing: tuple | None = None
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    attack_train: atk.AttackConfig = field(default_factory=lambda: atk.PGD10_TRAIN)
    attack_eval: dict = field(default_factory=atk.eval_attack_configs)
    eval_attacks: tuple = ("pgd20",)
    eval_q: float = 0.1
    select_on: str = "worst"

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        object.__setattr__(self, "eval_attacks", tuple(self.eval_attacks))
        if self.smoothing is not None:
            object.__setattr__(self, "smoothing", tuple(float(g) for g in self.smoothing))
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m <= 0 or m >= self.max_epochs for m in ms):
            raise ValueError(f"milestones {ms} must be strictly increasing and inside (0, {self.max_epochs})")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "sat-smooth" and self.smoothing is None:
            raise ValueError("sat-smooth needs per-class smoothing coefficients")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.select_on not in ("worst", "worst_q"):
            raise ValueError("select_on must be 'worst' or 'worst_q'")
        unknown = set(self.eval_attacks) - set(self.attack_eval)
        if unknown:
            raise ValueError(f"no attack configuration for {sorted(unknown)}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr / self.lr_divisor ** passed

    @property
    def needs_teacher(self) -> bool:
        return self.loss in ("absld", "rslad")


def scaled_milestones(epochs: int, milestones=FULL_SCHEDULE_MILESTONES, full_epochs: int = FULL_SCHEDULE_EPOCHS) -> tuple:
    """Shrink a long LR schedule onto ``epochs`` epochs, keeping milestone fractions."""
    out = []
    for m in milestones:
        s = int(math.floor(m * epochs / full_epochs))
        if 0 < s < epochs and (not out or s > out[-1]):
            out.append(s)
    return tuple(out)


@dataclass
class Checkpoint:
    epoch: int
    student_state: dict | None
    temperatures: ClassTemperatures | None
    record: dict
    history: list = field(default_factory=list)
    optimizer_state: dict | None = None
    rng_state: dict | None = None

    def to_payload(self) -> dict:
        return {
            "epoch": self.epoch,
            "student_state": self.student_state,
            "temperatures": None if self.temperatures is None else self.temperatures.to_dict(),
            "record": self.record,
            "history": self.history,
            "optimizer_state": self.optimizer_state,
            "rng_state": self.rng_state,
        }

    @classmethod
    def from_payload(cls, d: dict) -> "Checkpoint":
        temps = d.get("temperatures")
        return cls(
            epoch=d["epoch"],
            student_state=d["student_state"],
            temperatures=None if temps is None else ClassTemperatures.from_dict(temps),
            record=d["record"],
            history=d.get("history", []),
            optimizer_state=d.get("optimizer_state"),
            rng_state=d.get("rng_state"),
        )

    def save(self, path, extra: dict | None = None) -> None:
        payload = self.to_payload()
        if extra:
            payload["extra"] = extra
        torch.save(payload, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_payload(torch.load(path, weights_only=True))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


_STREAM_TRAIN, _STREAM_EVAL = 0, 1


def epoch_generator(seed: int, epoch: int, stream: int = _STREAM_TRAIN) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, epoch, stream))


def init_model(builder, seed: int):
    """Build a model with parameters drawn from a private RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 0xC0FFEE))
        return builder()


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model, x: torch.Tensor, batch: int = 1000) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i:i + batch]).argmax(1) for i in range(0, x.shape[0], batch)])


def evaluate(
    model,
    data: Dataset,
    attacks=("clean", "pgd20"),
    configs: dict | None = None,
    seed: int = 0,
    q: float = 0.1,
    batch: int = 500,
) -> dict:
    """Class-wise accuracy under each named attack, as FairnessReports."""
    configs = configs or atk.eval_attack_configs()
    was_training = model.training
    model.eval()
    out = {}
    for a_idx, name in enumerate(attacks):
        gen = torch.Generator().manual_seed(derive_seed(seed, a_idx, _STREAM_EVAL))
        preds = []
        for i in range(0, len(data), batch):
            xb, yb = data.x[i:i + batch], data.y[i:i + batch]
            xa = atk.run_attack(name, model, xb, yb, configs.get(name), gen)
            with torch.no_grad():
                preds.append(model(xa).argmax(1))
        acc = per_class_accuracy(torch.cat(preds).numpy(), data.y.numpy(), data.num_classes)
        out[name] = fairness_report(acc, q)
    model.train(was_training)
    return out


def report_record(rep: FairnessReport) -> dict:
    return {
        "average": rep.average,
        "worst": rep.worst,
        "worst_q": rep.worst_q,
        "sd": rep.sd,
        "nsd": rep.nsd,
        "per_class": list(rep.per_class_acc),
    }


def selection_score(record: dict, attack: str = "pgd20", worst_key: str = "worst") -> float | None:
    ev = record.get("eval", {}).get(attack)
    if ev is None:
        return None
    return (ev["average"] + ev[worst_key]) / 2


def select_checkpoint(history, attack: str = "pgd20", worst_key: str = "worst") -> Checkpoint:
    """Epoch maximizing the mean of average and worst-class robustness; ties go to the later epoch."""
    best, best_score = None, -math.inf
    for ckpt in history:
        score = selection_score(ckpt.record, attack, worst_key)
        # scores that tie up to rounding count as ties
        if score is not None and score >= best_score - 1e-12:
            best, best_score = ckpt, max(score, best_score)
    if best is None:
        raise ValueError("history has no evaluated epochs to select from")
    return best


# ---------------------------------------------------------------------------
# training


def _check_finite(value: torch.Tensor, epoch: int, step: int, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what} at epoch {epoch}, batch {step}")


def _state_copy(module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def train(
    cfg: TrainingConfig,
    student,
    teacher,
    train_set: Dataset,
    test_set: Dataset | None = None,
    metrics_path=None,
    resume: Checkpoint | None = None,
    keep_weights: bool = True,
) -> list:
    """Run the configured training and return one :class:`Checkpoint` per epoch.

    Each epoch resets the per-class risk accumulator, trains over stratified
    minibatches (inner maximization, optimizer step, risk accumulation) and,
    for the adaptive scheduler, re-temperates the teacher afterwards.
    """
    C = train_set.num_classes
    if cfg.batch_size < C:
        raise ValueError("batch_size must be at least the number of classes")
    if cfg.needs_teacher:
        if teacher is None:
            raise ValueError(f"loss {cfg.loss!r} needs a teacher")
        freeze(teacher)
    if cfg.smoothing is not None and len(cfg.smoothing) != C:
        raise ValueError("smoothing needs one coefficient per class")

    sched = cfg.scheduler
    if cfg.loss == "rslad":
        sched = replace(sched, mode=SchedulerMode.FIXED.value)
    temps = sched.initial(C)
    tau_s = temps.tau_student

    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    history: list = []
    records: list = []
    start = 1
    if resume is not None:
        student.load_state_dict(resume.student_state)
        opt.load_state_dict(resume.optimizer_state)
        temps = resume.temperatures
        records = copy.deepcopy(resume.history)
        start = resume.epoch + 1

    metrics_fh = open(metrics_path, "a") if metrics_path is not None else None
    acc = ClassRiskAccumulator(C)
    try:
        for epoch in range(start, cfg.max_epochs + 1):
            gen = epoch_generator(cfg.seed, epoch)
            rng_state = {"seed": cfg.seed, "epoch": epoch, "torch": gen.get_state()}
            lr = cfg.lr_at(epoch)
            for g in opt.param_groups:
                g["lr"] = lr
            acc.reset(epoch)
            used = temps
            student.train()
            sums = np.zeros(3)
            n_batches = 0
            for step, idx in enumerate(stratified_batches(train_set.y, cfg.batch_size, C, gen)):
                x, y = train_set.x[idx], train_set.y[idx]
                terms, logits_adv, logits_clean = _step(cfg, student, teacher, temps, x, y, gen, tau_s)
                _check_finite(terms.total, epoch, step, "loss")
                opt.zero_grad(set_to_none=True)
                terms.total.backward()
                opt.step()
                with torch.no_grad():
                    ce_adv = F.cross_entropy(logits_adv.detach(), y, reduction="none")
                    ce_clean = F.cross_entropy(logits_clean.detach(), y, reduction="none")
                acc.accumulate_batch(y.numpy(), ce_clean.double().numpy(), ce_adv.double().numpy())
                sums += [float(t.detach()) for t in terms]
                n_batches += 1

            risk_clean = acc.class_risks("clean")
            risk_adv = acc.class_risks("adv")
            if sched.mode == SchedulerMode.ADAPTIVE.value:
                temps = update_temperatures(temps, risk_adv, risk_clean, branches=sched.branches)

            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": float(sums[0] / n_batches),
                "loss_adv": float(sums[1] / n_batches),
                "loss_clean": float(sums[2] / n_batches),
                "risk_clean": risk_clean.tolist(),
                "risk_adv": risk_adv.tolist(),
                "risk_sd_clean": _safe_nsd(risk_clean),
                "risk_sd_adv": _safe_nsd(risk_adv),
                "tau_clean": used.tau_clean.tolist(),
                "tau_adv": used.tau_adv.tolist(),
                "eval": {},
            }
            if test_set is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs):
                reports = evaluate(student, test_set, cfg.eval_attacks, cfg.attack_eval, derive_seed(cfg.seed, epoch), cfg.eval_q)
                record["eval"] = {k: report_record(v) for k, v in reports.items()}
            records.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            log.info("epoch %d loss %.4f %s", epoch, record["loss"],
                     {k: round(v["average"], 4) for k, v in record["eval"].items()})
            history.append(Checkpoint(
                epoch=epoch,
                student_state=_state_copy(student) if keep_weights or epoch == cfg.max_epochs else None,
                temperatures=temps,
                record=record,
                history=copy.deepcopy(records),
                optimizer_state=copy.deepcopy(opt.state_dict()) if epoch == cfg.max_epochs or keep_weights else None,
                rng_state=rng_state,
            ))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return history


def _safe_nsd(v: np.ndarray) -> float | None:
    m = float(v.mean())
    return float(np.std(v) / m) if m > 0 else None


def _step(cfg: TrainingConfig, student, teacher, temps, x, y, gen, tau_s):
    """Inner maximization plus the loss for one minibatch."""
    if cfg.loss in ("absld", "rslad"):
        with torch.no_grad():
            t_logits = teacher(x)
        if cfg.loss == "absld":
            target_adv = teacher_soft_labels(t_logits, y, temps, "adv")
            target_clean = teacher_soft_labels(t_logits, y, temps, "clean")
        else:
            target_adv = target_clean = F.softmax(t_logits, dim=1)
        x_adv = atk.kl_inner_max(student, target_adv, x, cfg.attack_train, gen, tau_s).x_adv
        logits_adv, logits_clean = student(x_adv), student(x)
        if cfg.loss == "absld":
            terms = absld_loss_terms(logits_adv, logits_clean, target_adv, target_clean, y, cfg.alpha, tau_s)
        else:
            terms = rslad_loss_terms(logits_adv, logits_clean, target_clean, y, cfg.alpha)
        return terms, logits_adv, logits_clean

    if cfg.loss == "trades":
        with torch.no_grad():
            student.eval()
            target = F.softmax(student(x), dim=1)
            student.train()
        a_cfg = replace(cfg.attack_train, objective="kl")
        x_adv = atk.pgd(student, x, target, a_cfg, gen).x_adv
        logits_clean, logits_adv = student(x), student(x_adv)
        return trades_loss_terms(logits_clean, logits_adv, y, cfg.trades_lambda), logits_adv, logits_clean

    if cfg.loss == "sat":
        x_adv = atk.pgd(student, x, y, replace(cfg.attack_train, objective="ce"), gen).x_adv
        logits_adv = student(x_adv)
        loss = sat_loss(logits_adv, y)
    else:  # sat-smooth
        targets = smooth_labels(y, cfg.smoothing, len(cfg.smoothing), dtype=x.dtype)
        x_adv = atk.pgd(student, x, targets, replace(cfg.attack_train, objective="kl"), gen).x_adv
        logits_adv = student(x_adv)
        loss = soft_label_loss(logits_adv, targets)
    with torch.no_grad():
        logits_clean = student(x)
    zero = loss.new_zeros(())
    return LossTerms(loss, loss.detach(), zero), logits_adv, logits_clean


def run_ablation_absld_adv_only(cfg: TrainingConfig, student, teacher, train_set, test_set=None, **kw) -> list:
    """ABSLD with only the adversarial-branch temperatures re-temperated."""
    cfg = replace(cfg, loss="absld", scheduler=replace(cfg.scheduler, mode="adaptive", branches=("adv",)))
    return train(cfg, student, teacher, train_set, test_set, **kw)


def load_weights(model, ckpt: Checkpoint):
    model.load_state_dict(ckpt.student_state)
    return model
