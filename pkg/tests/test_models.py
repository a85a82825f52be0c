import numpy as np
import pytest
import torch

from dtda.datagen import SynthSpec
from dtda.errors import ConfigError, FormatError, InputError
from dtda.models import (MODEL_KINDS, ArchConfig, OptimConfig, forward_student, init_model,
                         init_student, load_checkpoint, param_hash, read_checkpoint, save_checkpoint)

ARCH = ArchConfig(widths=(4, 8))


def x_batch(n=5, size=16, seed=0):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_student_head_shapes():
    out = forward_student(init_student(ARCH, 0), x_batch())
    assert out.features.shape == (5, 8)
    assert out.edit.shape == (5, ARCH.num_attributes)
    assert out.rec.shape == (5, ARCH.num_identities)
    assert out.fas.shape == (5, 2)


def test_heads_share_one_encoder():
    s = init_student(ARCH, 0)
    out = s(x_batch())
    grads = [torch.autograd.grad(h.sum(), s.encoder.body[0].weight, retain_graph=True)[0]
             for h in (out.edit, out.rec, out.fas)]
    assert all(g.abs().sum() > 0 for g in grads)
    own = {n for n, _ in s.named_parameters() if n.startswith("encoder.")}
    assert len(own) == len(list(s.encoder.parameters()))


def test_live_probability_is_softmax_column():
    s = init_student(ARCH, 0)
    x = x_batch()
    p = s.live_probability(x)
    assert s.training  # mode restored
    s.eval()
    with torch.no_grad():
        sm = torch.softmax(s(x).fas, 1)
    assert np.allclose(sm.sum(1).numpy(), 1.0, atol=1e-6)
    assert np.allclose(p, sm[:, 1].numpy(), atol=1e-7)
    assert p.dtype == np.float64 and ((0 <= p) & (p <= 1)).all()


def test_seeded_init_is_reproducible():
    assert param_hash(init_student(ARCH, 3)) == param_hash(init_student(ARCH, 3))
    assert param_hash(init_student(ARCH, 3)) != param_hash(init_student(ARCH, 4))


@pytest.mark.parametrize("kind", sorted(MODEL_KINDS))
def test_checkpoint_round_trip(tmp_path, kind):
    arch = ArchConfig(widths=(4, 8), norm="batch")
    model = init_model(kind, arch, 1)
    model.train()
    model(x_batch())  # move BN running stats away from their init
    if kind != "student":
        model.freeze()
    path = save_checkpoint(model, tmp_path / "m.ckpt", step=7, seed=1, extra={"note": "x"})
    ck = read_checkpoint(path, kind=kind)
    assert param_hash(ck.model) == param_hash(model)
    assert ck.step == 7 and ck.extra == {"note": "x"}
    assert getattr(ck.model, "frozen", False) == getattr(model, "frozen", False)
    if ck.model.frozen:
        assert not any(p.requires_grad for p in ck.model.parameters())
        assert not ck.model.training


def test_checkpoint_kind_mismatch(tmp_path):
    path = save_checkpoint(init_student(ARCH, 0), tmp_path / "s.ckpt")
    with pytest.raises(FormatError, match="kind"):
        load_checkpoint(path, kind="teacher_perceptual")


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint(init_student(ARCH, 0), tmp_path / "s.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"garbage" * 4)
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FormatError, match="not found"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_frozen_model_gets_no_gradient():
    t = init_model("teacher_perceptual", ARCH, 0).freeze()
    y = t(x_batch())
    assert not y.requires_grad


def test_bad_input_shape():
    with pytest.raises(InputError):
        init_student(ARCH, 0)(torch.zeros(2, 1, 16, 16))


def test_arch_dataset_mismatch():
    with pytest.raises(ConfigError, match="num_identities"):
        ArchConfig(num_identities=5).check_dataset(SynthSpec(num_identities=8))
    init_student(ArchConfig.for_spec(SynthSpec()), 0, spec=SynthSpec())


@pytest.mark.parametrize("kw", [dict(norm="layer"), dict(widths=()), dict(num_domains=0)])
def test_arch_validation(kw):
    with pytest.raises(ConfigError):
        ArchConfig(**kw)


def test_cosine_schedule():
    opt = OptimConfig(lr=0.1)
    assert opt.lr_at(0, 100) == pytest.approx(0.1)
    assert opt.lr_at(50, 100) == pytest.approx(0.05)
    assert OptimConfig(lr=0.1, cosine=False).lr_at(99, 100) == 0.1
    sgd = opt.make_optimizer(init_student(ARCH, 0).parameters())
    assert sgd.defaults["momentum"] == 0.9 and sgd.defaults["weight_decay"] == 5e-4
