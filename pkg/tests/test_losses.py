import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from absld import attacks as atk
from absld.core_math import kl_div
from absld.losses import (
    absld_loss,
    absld_loss_terms,
    class_mean,
    rslad_loss,
    sat_loss,
    soft_label_loss,
    trades_loss,
    trades_loss_terms,
)
from absld.temperature import ClassTemperatures, teacher_soft_labels


def _logits(n=6, C=3, seed=0):
    return torch.randn(n, C, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_class_mean_averages_within_then_across_classes():
    v = torch.tensor([1.0, 3.0, 10.0], dtype=torch.float64)
    y = torch.tensor([0, 0, 1])
    assert class_mean(v, y, 3).item() == pytest.approx(6.0)


def test_identical_student_and_teacher_gives_zero():
    z = _logits()
    p = torch.softmax(z, 1)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    assert absld_loss(z, z, p, p, y).item() == pytest.approx(0.0, abs=1e-12)


def test_alpha_one_ignores_clean_term():
    z = _logits()
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    p = torch.softmax(_logits(seed=1), 1)
    a = absld_loss(z, z, p, p, y, alpha=1.0)
    b = absld_loss(z, _logits(seed=5), p, torch.softmax(_logits(seed=7), 1), y, alpha=1.0)
    assert a.item() == pytest.approx(b.item())


def test_hand_arithmetic_case():
    # per-class KLs adv=[0.2, 0.4], clean=[0.0, 0.2] at alpha 0.5 -> 0.2
    def student_for(kl_target, target):
        # logits [m, 0] whose KL to ``target`` equals kl_target, by bisection on m
        lo, hi = 0.0, 50.0
        for _ in range(200):
            mid = (lo + hi) / 2
            val = kl_div(torch.softmax(torch.tensor([mid, 0.0], dtype=torch.float64), 0), target).item()
            lo, hi = (lo, mid) if val > kl_target else (mid, hi)
        return torch.tensor([lo, 0.0], dtype=torch.float64)

    target = torch.tensor([0.5, 0.5], dtype=torch.float64)
    adv = torch.stack([student_for(0.2, target), student_for(0.4, target)])
    clean = torch.stack([torch.zeros(2, dtype=torch.float64), student_for(0.2, target)])
    t = target.expand(2, 2)
    y = torch.tensor([0, 1])
    terms = absld_loss_terms(adv, clean, t, t, y, alpha=0.5)
    assert terms.adv.item() == pytest.approx(0.3, abs=1e-9)
    assert terms.clean.item() == pytest.approx(0.1, abs=1e-9)
    assert terms.total.item() == pytest.approx(0.2, abs=1e-9)


def test_rslad_equals_absld_with_unit_temperatures():
    zs, zc, zt = _logits(seed=1), _logits(seed=2), _logits(seed=3)
    y = torch.tensor([0, 1, 2, 2, 1, 0])
    temps = ClassTemperatures.uniform(3)
    ta = teacher_soft_labels(zt, y, temps, "adv")
    tc = teacher_soft_labels(zt, y, temps, "clean")
    assert torch.equal(absld_loss(zs, zc, ta, tc, y, alpha=0.7), rslad_loss(zs, zc, torch.softmax(zt, 1), y, alpha=0.7))


def test_absld_input_validation():
    z = _logits()
    y = torch.zeros(6, dtype=torch.long)
    with pytest.raises(ValueError):
        absld_loss(z, z, z.softmax(1), z.softmax(1), y, alpha=1.5)
    with pytest.raises(ValueError):
        absld_loss(z, z[:, :2], z.softmax(1), z.softmax(1), y)
    with pytest.raises(ValueError):
        absld_loss(z, z, z.softmax(1), z.softmax(1), y[:3])


def test_sat_loss_values():
    confident = torch.tensor([[20.0, 0.0]], dtype=torch.float64)
    assert sat_loss(confident, torch.tensor([0])).item() == pytest.approx(0.0, abs=1e-8)
    assert sat_loss(torch.zeros(1, 10, dtype=torch.float64), torch.tensor([3])).item() == pytest.approx(math.log(10))


def test_trades_reductions():
    z = _logits()
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    ce = F.cross_entropy(z, y)
    assert trades_loss(z, z, y, 6.0).item() == pytest.approx(ce.item())
    assert trades_loss(z, _logits(seed=4), y, 0.0).item() == pytest.approx(ce.item())


def test_trades_hand_case():
    clean = torch.tensor([[math.log(3), 0.0]], dtype=torch.float64)  # p = [0.75, 0.25]
    adv = torch.zeros(1, 2, dtype=torch.float64)  # q = [0.5, 0.5]
    y = torch.tensor([0])
    kl = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
    terms = trades_loss_terms(clean, adv, y, 2.0)
    assert terms.adv.item() == pytest.approx(kl)
    assert terms.total.item() == pytest.approx(-math.log(0.75) + 2 * kl)


def test_soft_label_loss_is_batch_mean_kl():
    z = _logits()
    t = torch.softmax(_logits(seed=3), 1)
    expected = np.mean([kl_div(torch.softmax(z[i], 0), t[i]).item() for i in range(6)])
    assert soft_label_loss(z, t).item() == pytest.approx(expected)


# -- gradient fidelity (central finite differences, float64) -----------------


def _param_check(model, loss_of_params):
    names = [n for n, _ in model.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())
    assert sum(p.numel() for p in params) <= 20

    def fn(*ps):
        return loss_of_params(dict(zip(names, ps)))

    return torch.autograd.gradcheck(fn, params, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_absld_gradient_matches_finite_differences(tiny_net):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(8, 2, generator=g, dtype=torch.float64)
    x_adv = (x + 0.03 * (2 * torch.rand(8, 2, generator=g, dtype=torch.float64) - 1)).clamp(0, 1)
    y = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])
    t_logits = torch.randn(8, 3, generator=g, dtype=torch.float64) * 2
    temps = ClassTemperatures(np.array([0.5, 1.7, 3.0]), np.array([2.5, 0.8, 1.2]))
    ta = teacher_soft_labels(t_logits, y, temps, "adv")
    tc = teacher_soft_labels(t_logits, y, temps, "clean")

    def loss(params):
        return absld_loss(functional_call(tiny_net, params, (x_adv,)), functional_call(tiny_net, params, (x,)),
                          ta, tc, y, alpha=0.8)

    assert _param_check(tiny_net, loss)


def test_trades_gradient_matches_finite_differences(tiny_net):
    g = torch.Generator().manual_seed(1)
    x = torch.rand(8, 2, generator=g, dtype=torch.float64)
    x_adv = (x + 0.05 * torch.randn(8, 2, generator=g, dtype=torch.float64)).clamp(0, 1)
    y = torch.tensor([2, 1, 0, 0, 1, 2, 0, 1])

    def loss(params):
        return trades_loss(functional_call(tiny_net, params, (x,)), functional_call(tiny_net, params, (x_adv,)), y, 6.0)

    assert _param_check(tiny_net, loss)


@pytest.mark.parametrize("objective", ["ce", "kl", "cw"])
def test_attack_objective_input_gradient_matches_finite_differences(tiny_net, objective):
    g = torch.Generator().manual_seed(2)
    x = torch.rand(6, 2, generator=g, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    target = torch.softmax(torch.randn(6, 3, generator=g, dtype=torch.float64), 1) if objective == "kl" else y
    tau = 1.3 if objective == "kl" else 1.0
    if objective == "cw":
        with torch.no_grad():
            raw = atk.cw_margin(tiny_net(x), y, kappa=1e9)
            top2 = tiny_net(x).topk(2, 1).values
        assert (raw.abs() > 1e-3).all() and (top2[:, 0] - top2[:, 1] > 1e-3).all()  # away from kinks
    x = x.requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda inp: atk.attack_objective(tiny_net, inp, target, objective, tau).sum(),
        (x,), eps=1e-6, atol=1e-8, rtol=1e-4,
    )
    # the gradient the attacks step along is the one checked above
    analytic = atk.input_gradient(tiny_net, x, target, objective, tau)
    x2 = x.detach().clone().requires_grad_(True)
    atk.attack_objective(tiny_net, x2, target, objective, tau).sum().backward()
    assert torch.equal(analytic, x2.grad)
