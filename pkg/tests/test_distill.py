import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from dtda.daa import AttackConfig
from dtda.datagen import SynthSpec, synthesize
from dtda.distill import (KDConfig, Teachers, fas_loss, kd_loss, read_loss_csv, total_loss, train,
                          train_step, write_loss_csv)
from dtda.errors import ConfigError, DivergenceError, InputError
from dtda.models import ArchConfig, OptimConfig, init_model, init_student, param_hash
from dtda.pretrain import train_domain_classifier, train_teacher_generative, train_teacher_perceptual


def kl_reference(t, s, tau):
    """Direct double-loop KL in float64."""
    out = 0.0
    for tr, sr in zip(t.tolist(), s.tolist()):
        p = np.exp(np.array(tr) / tau - np.logaddexp.reduce(np.array(tr) / tau))
        q = np.exp(np.array(sr) / tau - np.logaddexp.reduce(np.array(sr) / tau))
        out += float(np.sum(p * (np.log(p) - np.log(q))))
    return out / len(t)


logits = st.lists(st.floats(-8, 8), min_size=6, max_size=6).map(
    lambda v: torch.tensor(v, dtype=torch.float64).reshape(2, 3))


class TestKDLoss:
    @settings(max_examples=100, deadline=None)
    @given(logits, logits, st.floats(0.5, 8))
    def test_matches_reference(self, t, s, tau):
        assert kd_loss(t, s, tau).item() == pytest.approx(kl_reference(t, s, tau), rel=1e-9, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(logits, st.floats(0.5, 8))
    def test_zero_when_identical(self, t, tau):
        assert abs(kd_loss(t, t.clone(), tau).item()) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(logits, logits, st.floats(-5, 5), st.floats(-5, 5))
    def test_shift_invariance(self, t, s, a, b):
        assert kd_loss(t + a, s + b, 2.0).item() == pytest.approx(kd_loss(t, s, 2.0).item(), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(logits, logits)
    def test_nonnegative(self, t, s):
        assert kd_loss(t, s, 4.0).item() >= -1e-12

    def test_tau_squared_scaling(self):
        t, s = torch.randn(4, 5, dtype=torch.float64), torch.randn(4, 5, dtype=torch.float64)
        assert kd_loss(t, s, 3.0, tau_squared=True).item() == pytest.approx(9 * kd_loss(t, s, 3.0).item())

    def test_known_value(self):
        # teacher one-hot-ish vs uniform student: KL = log(k) - H(p)
        t = torch.tensor([[0.0, math.log(3.0)]], dtype=torch.float64)
        s = torch.zeros(1, 2, dtype=torch.float64)
        p = torch.tensor([0.25, 0.75], dtype=torch.float64)
        expected = float((p * torch.log(p / 0.5)).sum())
        assert kd_loss(t, s, 1.0).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            kd_loss(torch.zeros(2, 3), torch.zeros(2, 4), 1.0)


def test_fas_loss_is_binary_cross_entropy():
    z = torch.tensor([[0.3, -1.2], [2.0, 0.5]], dtype=torch.float64)
    y = torch.tensor([1, 0])
    p_live = torch.softmax(z, 1)[:, 1]
    bce = -(y * torch.log(p_live) + (1 - y) * torch.log(1 - p_live)).mean()
    assert fas_loss(z, y).item() == pytest.approx(bce.item(), rel=1e-12)


@pytest.mark.parametrize("y", [torch.tensor([0.0, 1.0]), torch.tensor([0, 2])])
def test_fas_loss_label_checks(y):
    with pytest.raises(InputError):
        fas_loss(torch.zeros(2, 2), y)


def finite_difference(f, z, h=1e-6):
    g = torch.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        zp, zm = z.clone(), z.clone()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


def test_loss_gradients_match_finite_differences():
    rng = torch.Generator().manual_seed(0)
    for case in range(50):
        k = 2 + case % 5
        t = torch.randn(3, k, generator=rng, dtype=torch.float64) * 3
        s = (torch.randn(3, k, generator=rng, dtype=torch.float64) * 3).requires_grad_(True)
        tau = 0.5 + case % 4
        (g,) = torch.autograd.grad(kd_loss(t, s, tau), s)
        fd = finite_difference(lambda z: kd_loss(t, z, tau).item(), s.detach())
        assert torch.allclose(g, fd, rtol=1e-4, atol=1e-8)

        z = (torch.randn(4, 2, generator=rng, dtype=torch.float64) * 2).requires_grad_(True)
        y = torch.randint(0, 2, (4,), generator=rng)
        (g,) = torch.autograd.grad(fas_loss(z, y), z)
        fd = finite_difference(lambda v: fas_loss(v, y).item(), z.detach())
        assert torch.allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_kd_gradient_closed_form():
    """d KL / d student = (q - p) / (tau * N)."""
    t = torch.randn(5, 4, dtype=torch.float64)
    s = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(kd_loss(t, s, 2.0), s)
    p, q = torch.softmax(t / 2, 1), torch.softmax(s.detach() / 2, 1)
    assert torch.allclose(g, (q - p) / (2.0 * 5), atol=1e-14)


def test_total_loss():
    cfg = KDConfig(lambda1=0.6, lambda2=0.4)
    assert total_loss(1.0, 0.5, 0.25, cfg) == pytest.approx(1.4, abs=1e-15)


@pytest.mark.parametrize("kw", [dict(tau=0), dict(tau=float("nan")), dict(lambda1=-1),
                                dict(lambda2=float("inf"))])
def test_kd_config_validation(kw):
    with pytest.raises(ConfigError):
        KDConfig(**kw)


# --------------------------------------------------------------------------- #
# training loop

@pytest.fixture(scope="module")
def tiny():
    ds = synthesize(SynthSpec(num_domains=3, samples_per_domain=24, image_size=16, seed=3))
    arch = ArchConfig.for_spec(ds.spec, widths=(4, 8))
    opt = OptimConfig(epochs=2, batch_size=16)
    dc = train_domain_classifier(ds, opt, arch, seed=0)
    tp = train_teacher_perceptual(ds, opt, arch, seed=0)
    tg = train_teacher_generative(ds, opt, arch, seed=0)
    return ds, arch, dc, tp, tg


def test_baseline_reduces_to_plain_cross_entropy(tiny):
    """No attack, zero lambdas: bitwise the same update as hand-written CE training."""
    ds, arch, dc, tp, tg = tiny
    x = torch.from_numpy(ds.images[:16].copy())
    y = torch.from_numpy(ds.liveness[:16].copy())
    d = torch.from_numpy(ds.domain_id[:16].copy())
    a, b = init_student(arch, 1), init_student(arch, 1)
    opt_a = OptimConfig().make_optimizer(a.parameters())
    opt_b = OptimConfig().make_optimizer(b.parameters())
    losses = train_step(a, Teachers(tp, tg), dc, (x, y, d), AttackConfig(epsilon=0.0),
                        KDConfig(lambda1=0.0, lambda2=0.0), opt_a)
    loss = F.cross_entropy(b(x).fas, y)
    opt_b.zero_grad()
    loss.backward()
    opt_b.step()
    assert param_hash(a) == param_hash(b)
    assert math.isnan(losses["L_fr"]) and math.isnan(losses["L_fa"])
    assert losses["L_sum"] == losses["L_f"]


def test_history_and_loss_csv(tiny, tmp_path):
    ds, arch, dc, tp, tg = tiny
    opt = OptimConfig(epochs=2, batch_size=16)
    _, state = train(init_student(arch, 0), Teachers(tp, tg), dc, ds, opt,
                     AttackConfig(steps=2), KDConfig(), seed=0)
    steps_per_epoch = math.ceil(len(ds) / 16)
    assert len(state.history) == 2 * steps_per_epoch == state.step
    for h in state.history:
        assert h["L_sum"] == pytest.approx(h["L_f"] + 0.3 * h["L_fr"] + 0.3 * h["L_fa"], rel=1e-5)
    path = write_loss_csv(state.history, tmp_path / "loss.csv")
    assert read_loss_csv(path) == state.history


def test_resume_gives_identical_history(tiny, tmp_path):
    ds, arch, dc, tp, tg = tiny
    opt = OptimConfig(epochs=3, batch_size=16)
    args = (Teachers(tp, tg), dc, ds, opt, AttackConfig(steps=2), KDConfig())
    full, s_full = train(init_student(arch, 0), *args, seed=4)
    ck = tmp_path / "student.ckpt"
    train(init_student(arch, 0), *args, seed=4, checkpoint_path=ck, max_epochs=1)
    resumed, s_res = train(init_student(arch, 0), *args, seed=4, checkpoint_path=ck, resume=True)
    assert s_res.history == s_full.history
    assert param_hash(resumed) == param_hash(full)


def test_unfrozen_teacher_rejected(tiny):
    ds, arch, dc, tp, tg = tiny
    loose = init_model("teacher_perceptual", arch, 0)
    with pytest.raises(ConfigError):
        train(init_student(arch, 0), Teachers(loose, tg), dc, ds, OptimConfig(epochs=1))


def test_divergence_reports_step(tiny):
    ds, arch, dc, tp, tg = tiny
    student = init_student(arch, 0)
    with pytest.raises(DivergenceError, match=r"step 0"):
        train(student, Teachers(None, None), None, ds, OptimConfig(lr=1e38, epochs=2, batch_size=16),
              AttackConfig(epsilon=0.0), KDConfig(lambda1=0, lambda2=0), seed=0,
              on_batch=lambda ids: _poison(student))


def _poison(student):
    with torch.no_grad():
        student.head_fas.weight.fill_(float("nan"))


def test_teachers_are_not_updated(tiny):
    ds, arch, dc, tp, tg = tiny
    before = [param_hash(m) for m in (dc, tp, tg)]
    train(init_student(arch, 0), Teachers(tp, tg), dc, ds, OptimConfig(epochs=1, batch_size=16),
          AttackConfig(steps=1), KDConfig(), seed=0)
    assert [param_hash(m) for m in (dc, tp, tg)] == before
