from dataclasses import replace

import numpy as np
import pytest
import torch

from absld import attacks as atk
from absld.data import Dataset, SyntheticTaskSpec, make_synthetic
from absld.fairness import DegenerateEpochError
from absld.models import ModelSpec, build_model
from absld.trainer import (
    Checkpoint,
    NumericalError,
    SchedulerConfig,
    TrainingConfig,
    init_model,
    load_weights,
    run_ablation_absld_adv_only,
    scaled_milestones,
    select_checkpoint,
    train,
)

EPS = 0.05
SPEC = SyntheticTaskSpec([[0.3, 0.3], [0.7, 0.7]], [0.3, 0.05], 40)
STUDENT = ModelSpec("mlp", (16,), 2, (2,))
TEACHER = ModelSpec("mlp", (32,), 2, (2,))


def _cfg(**kw):
    base = dict(
        max_epochs=2,
        lr=0.05,
        lr_milestones=(),
        batch_size=32,
        attack_train=atk.AttackConfig(epsilon=EPS, step_size=EPS / 4, steps=3, objective="kl"),
        attack_eval=atk.eval_attack_configs(EPS, EPS / 4),
        eval_attacks=("pgd20",),
    )
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(SPEC, 0, "train"), make_synthetic(SPEC, 0, "test")


def _run(cfg, data, **kw):
    student = init_model(lambda: build_model(STUDENT), cfg.seed)
    teacher = init_model(lambda: build_model(TEACHER), 99)
    return train(cfg, student, teacher, data[0], data[1], **kw), student, teacher


def test_lr_schedule_is_piecewise_constant():
    cfg = TrainingConfig(max_epochs=30, lr=0.1, lr_milestones=(21, 26, 28))
    assert cfg.lr_at(1) == 0.1 and cfg.lr_at(20) == 0.1
    assert cfg.lr_at(21) == pytest.approx(0.01)
    assert cfg.lr_at(26) == pytest.approx(0.001)
    assert cfg.lr_at(30) == pytest.approx(1e-4)


def test_scaled_milestones():
    assert scaled_milestones(300) == (215, 260, 285)
    assert scaled_milestones(30) == (21, 26, 28)
    assert scaled_milestones(3) == (2,)


@pytest.mark.parametrize(
    "kw",
    [
        dict(max_epochs=0),
        dict(lr_milestones=(5, 3), max_epochs=10),
        dict(lr_milestones=(10,), max_epochs=10),
        dict(loss="mse"),
        dict(loss="sat-smooth"),
        dict(alpha=1.2),
        dict(eval_every=0),
        dict(select_on="average"),
        dict(eval_attacks=("aa",)),
    ],
)
def test_training_config_validation(kw):
    with pytest.raises(ValueError):
        TrainingConfig(**kw)


def test_manual_mode_needs_table():
    with pytest.raises(ValueError):
        SchedulerConfig(mode="manual-static")
    with pytest.raises(ValueError):
        SchedulerConfig(branches=("train",))
    temps = SchedulerConfig(mode="manual-static", manual_table=(0.2, 6.0)).initial(2)
    assert temps.tau_adv.tolist() == [0.2, 6.0]


def _ckpt(epoch, avg, worst):
    return Checkpoint(epoch, None, None, {"eval": {"pgd20": {"average": avg, "worst": worst, "worst_q": worst}}})


def test_select_checkpoint_uses_mean_of_average_and_worst():
    assert select_checkpoint([_ckpt(1, 0.50, 0.20), _ckpt(2, 0.49, 0.30)]).epoch == 2
    assert select_checkpoint([_ckpt(1, 0.50, 0.30), _ckpt(2, 0.49, 0.20)]).epoch == 1


def test_select_checkpoint_ties_go_to_later_epoch():
    assert select_checkpoint([_ckpt(1, 0.4, 0.2), _ckpt(2, 0.3, 0.3), _ckpt(3, 0.1, 0.1)]).epoch == 2
    assert select_checkpoint([_ckpt(7, 0.4, 0.2)]).epoch == 7
    unevaluated = Checkpoint(8, None, None, {"eval": {}})
    assert select_checkpoint([_ckpt(7, 0.4, 0.2), unevaluated]).epoch == 7
    with pytest.raises(ValueError):
        select_checkpoint([])
    with pytest.raises(ValueError):
        select_checkpoint([unevaluated])


def test_same_seed_gives_identical_history(data):
    cfg = _cfg()
    a, _, _ = _run(cfg, data)
    b, _, _ = _run(cfg, data)
    assert [c.record for c in a] == [c.record for c in b]
    for k, v in a[-1].student_state.items():
        assert torch.equal(v, b[-1].student_state[k])
    c, _, _ = _run(replace(cfg, seed=1), data)
    assert [x.record for x in a] != [x.record for x in c]


def test_first_epoch_retemperates_by_risk_order(data):
    history, _, _ = _run(_cfg(max_epochs=1), data)
    rec, temps = history[0].record, history[0].temperatures
    assert rec["tau_adv"] == [1.0, 1.0] and rec["tau_clean"] == [1.0, 1.0]
    for branch in ("adv", "clean"):
        risk = np.array(rec[f"risk_{branch}"])
        tau = getattr(temps, f"tau_{branch}")
        hi, lo = int(np.argmax(risk)), int(np.argmin(risk))
        assert tau[hi] == pytest.approx(0.9, abs=1e-12)
        assert tau[lo] == pytest.approx(1.1, abs=1e-12)


def test_recorded_temperatures_are_those_used_in_the_epoch(data):
    history, _, _ = _run(_cfg(max_epochs=3), data)
    for prev, cur in zip(history, history[1:]):
        assert cur.record["tau_adv"] == prev.temperatures.tau_adv.tolist()


def test_adv_only_ablation_keeps_clean_temperatures(data):
    student = init_model(lambda: build_model(STUDENT), 0)
    teacher = init_model(lambda: build_model(TEACHER), 99)
    history = run_ablation_absld_adv_only(_cfg(max_epochs=3), student, teacher, *data)
    assert all(c.temperatures.tau_clean.tolist() == [1.0, 1.0] for c in history)
    assert history[-1].temperatures.tau_adv.tolist() != [1.0, 1.0]


def test_rslad_matches_fixed_mode_absld(data):
    fixed, _, _ = _run(_cfg(scheduler=SchedulerConfig(mode="fixed")), data)
    rslad, _, _ = _run(_cfg(loss="rslad"), data)
    for a, b in zip(fixed, rslad):
        assert a.record["loss"] == b.record["loss"]
        assert a.record["tau_adv"] == [1.0, 1.0] and b.record["tau_adv"] == [1.0, 1.0]


def test_teacher_is_frozen_and_unchanged(data):
    teacher = init_model(lambda: build_model(TEACHER), 99)
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    student = init_model(lambda: build_model(STUDENT), 0)
    train(_cfg(), student, teacher, data[0])
    assert not teacher.training
    assert all(not p.requires_grad for p in teacher.parameters())
    assert all(torch.equal(v, before[k]) for k, v in teacher.state_dict().items())


def test_resume_reproduces_uninterrupted_run(data, tmp_path):
    cfg = _cfg(max_epochs=3)
    full, _, _ = _run(cfg, data)
    full[0].save(tmp_path / "e1.pt")
    resume = Checkpoint.load(tmp_path / "e1.pt")
    assert resume.record == full[0].record
    assert np.array_equal(resume.temperatures.tau_adv, full[0].temperatures.tau_adv)
    tail, _, _ = _run(cfg, data, resume=resume)
    assert [c.epoch for c in tail] == [2, 3]
    assert [c.record for c in tail] == [c.record for c in full[1:]]
    assert tail[-1].history == full[-1].history
    for k, v in tail[-1].student_state.items():
        assert torch.equal(v, full[-1].student_state[k])


def test_metrics_file_has_one_line_per_epoch(data, tmp_path):
    path = tmp_path / "metrics.jsonl"
    history, _, _ = _run(_cfg(max_epochs=2), data, metrics_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert '"epoch": 2' in lines[1]


def test_keep_weights_false_keeps_only_last(data):
    history, student, _ = _run(_cfg(max_epochs=2), data, keep_weights=False)
    assert history[0].student_state is None
    loaded = load_weights(build_model(STUDENT), history[-1])
    x = data[1].x[:5]
    assert torch.equal(loaded(x), student(x))


@pytest.mark.parametrize("loss", ["trades", "sat", "sat-smooth"])
def test_teacherless_losses_train(data, loss):
    kw = dict(loss=loss)
    if loss == "sat-smooth":
        kw["smoothing"] = (0.05, 0.35)
    student = init_model(lambda: build_model(STUDENT), 0)
    history = train(_cfg(**kw), student, None, *data)
    assert len(history) == 2 and np.isfinite(history[-1].record["loss"])
    assert history[-1].temperatures.tau_adv.tolist() != [1.0, 1.0] or loss == "trades"


def test_distillation_without_teacher_raises(data):
    with pytest.raises(ValueError):
        train(_cfg(), build_model(STUDENT), None, data[0])
    with pytest.raises(ValueError):
        train(_cfg(batch_size=1), build_model(STUDENT), build_model(TEACHER), data[0])


def test_empty_class_is_degenerate(data):
    train_set = data[0]
    three = Dataset(train_set.x, train_set.y, 3)
    student = build_model(ModelSpec("mlp", (8,), 3, (2,)))
    with pytest.raises(DegenerateEpochError):
        train(_cfg(loss="sat"), student, None, three)


def test_non_finite_loss_raises(data):
    student = build_model(STUDENT)
    with torch.no_grad():
        student.net[-1].bias[0] = float("nan")
    cfg = _cfg(loss="sat", attack_train=atk.AttackConfig(epsilon=EPS, step_size=EPS, steps=0))
    with pytest.raises(NumericalError):
        train(cfg, student, None, data[0])
