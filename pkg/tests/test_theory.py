from dataclasses import replace

import numpy as np
import pytest
import torch

from absld import theory as th
from absld.data import SyntheticTaskSpec
from absld.fairness import fairness_report
from absld.models import build_model
from absld.trainer import init_model


@pytest.fixture(scope="module")
def task():
    spec = SyntheticTaskSpec([[0.3, 0.3], [0.7, 0.7]], [0.3, 0.05], 60)
    return th.synthetic_task(spec, epochs=2)


def test_smoothness_assignment_validation():
    assert th.SmoothnessAssignment.ssd(3).gammas == (0.2, 0.2, 0.2)
    assert th.SmoothnessAssignment.dsd([1], 3).gammas == (0.35, 0.05, 0.35)
    with pytest.raises(ValueError):
        th.SmoothnessAssignment((0.1, 0.2), "SSD")
    with pytest.raises(ValueError):
        th.SmoothnessAssignment((1.0, 0.2), "DSD")
    with pytest.raises(ValueError):
        th.SmoothnessAssignment((0.1,), "XSD")
    with pytest.raises(ValueError):
        th.SmoothnessAssignment.dsd([0], 2, gamma_hard=0.3, gamma_easy=0.1)


def test_fraction_milestones():
    assert th.fraction_milestones(15) == (10, 13)
    assert th.fraction_milestones(20) == (14, 17)
    assert th.fraction_milestones(3) == (2,)
    assert th.fraction_milestones(1) == ()


def test_manual_table_and_easy_classes(task):
    task = replace(task, hard=(0,))
    assert task.easy == (1,)
    assert th.manual_table(task, 0.5, 5.0) == (0.5, 5.0)


def test_teacher_precondition(task):
    class Always(torch.nn.Module):
        def forward(self, x):
            return torch.stack([torch.ones(x.shape[0]), torch.zeros(x.shape[0])], 1)

    with pytest.raises(th.PreconditionError):
        th.check_teacher(Always(), task)

    class Oracle(torch.nn.Module):
        def forward(self, x):
            s = x.sum(1) - 1.0
            return torch.stack([-s, s], 1)

    assert (th.check_teacher(Oracle(), task) > 0.5).all()


def test_gap_surface_spearman_signs():
    gaps = {(0.5, 1.0): [0.3, 0.1], (1.0, 1.0): [0.2, 0.2], (2.0, 1.0): [0.1, 0.3],
            (1.0, 0.5): [0.1, 0.1], (1.0, 2.0): [0.4, 0.0]}
    surface = th.GapSurface((0.5, 1.0, 2.0), (0.5, 1.0, 2.0), gaps, (0, 1))
    assert surface.spearman_per_seed("hard") == pytest.approx([-1.0, 1.0])
    assert surface.spearman_per_seed("easy") == pytest.approx([1.0, -0.5])
    assert surface.mean_gap(1.0, 1.0) == pytest.approx(0.2)
    assert len(surface.rows()) == 5


def test_adaptive_wins_treats_undefined_nsd_as_worst():
    good, bad, zero = fairness_report([0.5, 0.5]), fairness_report([0.2, 0.8]), fairness_report([0.0, 0.0])
    cmp_ = th.ManualAdaptiveComparison((0, 1, 2), manual=[bad, zero, good], adaptive=[good, good, zero])
    assert cmp_.adaptive_wins() == 2
    assert [r["arm"] for r in cmp_.rows()] == ["manual", "adaptive"] * 3


def _measurement(seed, gap):
    return th.GapMeasurement(seed, gap, 0.5, 0.6, (0.5, 0.7), (1.0, 1.0 - gap), gap > 0)


def test_conditioned_pairs_drop_runs_where_hard_class_is_not_riskier():
    pairs = [th.PairedGap(0, _measurement(0, 0.4), _measurement(0, 0.2)),
             th.PairedGap(1, _measurement(1, 0.4), _measurement(1, -0.1))]
    res = th.SsdDsdResult("toy", (0,), pairs)
    assert [p.seed for p in res.conditioned_pairs()] == [0]
    s = res.summary()
    assert s["conditioned_pairs"] == 1 and s["gap_reduced_in"] == 1
    assert s["median_gap_dsd"] == pytest.approx(0.05)


def test_designation_and_paired_runs(task):
    hard = th.designate_hard_classes(task, seed=1000)
    assert len(hard) == 1 and task.hard == hard
    res = th.run_ssd_vs_dsd(task, th.SmoothnessAssignment.ssd(2), th.SmoothnessAssignment.dsd(hard, 2), [0])
    assert res.seeds == [0]
    p = res.pairs[0]
    assert 0 <= p.ssd.worst <= p.ssd.average <= 1
    assert p.ssd.gap == pytest.approx(p.ssd.per_class_risk[hard[0]] - p.ssd.per_class_risk[1 - hard[0]])
    with pytest.raises(ValueError):
        th.run_ssd_vs_dsd(task, th.SmoothnessAssignment.ssd(3), th.SmoothnessAssignment.dsd(hard, 2), [0])


def test_temperature_sweep_grid_handling(task):
    task = replace(task, hard=(0,))

    class Oracle(torch.nn.Module):
        def forward(self, x):
            s = 4 * (x.sum(1) - 1.0)
            return torch.stack([-s, s], 1)

    with pytest.raises(ValueError):
        th.run_temperature_monotonicity(task, Oracle(), (), (1.0,), seeds=[0])
    with pytest.raises(ValueError):
        th.run_temperature_monotonicity(replace(task, hard=()), Oracle(), (1.0,), (1.0,), seeds=[0])
    surface = th.run_temperature_monotonicity(task, Oracle(), (1.0,), (1.0,), seeds=[0, 1])
    assert list(surface.gaps) == [(1.0, 1.0)]
    assert len(surface.gaps[(1.0, 1.0)]) == 2


def test_pretrained_teacher_is_frozen(task):
    teacher = th.pretrain_teacher(task, seed=5, epochs=1)
    assert not teacher.training
    assert all(not p.requires_grad for p in teacher.parameters())
    fresh = init_model(lambda: build_model(task.teacher), 5)
    assert any(not torch.equal(a, b) for a, b in zip(teacher.parameters(), fresh.parameters()))
