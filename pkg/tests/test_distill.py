import math

import pytest
import torch

from fsr.distill import (
    Distribution,
    Projector,
    TeacherState,
    ema_update,
    loss_certain,
    loss_uncertain,
    project_and_normalize,
    temperature_softmax,
    update_center,
)
from fsr.aggregation import Aggregator
from fsr.encoder import Encoder, EncoderConfig


def dist(probs):
    probs = torch.as_tensor(probs, dtype=torch.float64)
    return Distribution(logits=probs.log(), probs=probs, log_probs=probs.log())


def test_uniform_logits():
    d = temperature_softmax(torch.zeros(3, 8), 0.1)
    torch.testing.assert_close(d.probs, torch.full((3, 8), 1 / 8))


def test_two_class_temperature():
    d = temperature_softmax(torch.tensor([1.0, 0.0], dtype=torch.float64), 0.1)
    torch.testing.assert_close(d.probs, torch.tensor([0.9999546021312976, 4.5397868702434395e-05],
                                                     dtype=torch.float64))


def test_shift_invariance_and_center():
    logits = torch.randn(5, 16, dtype=torch.float64)
    shift = torch.randn(16, dtype=torch.float64)
    a = temperature_softmax(logits, 0.04).probs
    b = temperature_softmax(logits + 3.0, 0.04).probs
    torch.testing.assert_close(a, b)
    c = temperature_softmax(logits + shift, 0.04, center=shift).probs
    torch.testing.assert_close(a, c)


def test_bad_temperature():
    with pytest.raises(ValueError):
        temperature_softmax(torch.zeros(2), 0.0)
    with pytest.raises(ValueError):
        project_and_normalize(torch.zeros(1, 4), Projector(4, 8, 8, 4), -1.0)


def test_projector_rows_sum_to_one():
    g = torch.Generator().manual_seed(0)
    for trial in range(50):
        torch.manual_seed(trial)
        proj = Projector(16, out_dim=32, hidden_dim=32, bottleneck_dim=8)
        tokens = torch.randn(2, 17, 16, generator=g) * (1 + trial)
        d = project_and_normalize(tokens, proj, 0.1)
        assert d.probs.shape == (2, 17, 32)
        assert torch.all((d.probs.sum(-1) - 1).abs() < 1e-6)
        assert torch.all(d.probs > 0) and torch.all(d.probs < 1)


def test_projector_output_layer_is_unit_norm():
    proj = Projector(8, out_dim=12, hidden_dim=16, bottleneck_dim=4)
    w = proj.last.weight
    torch.testing.assert_close(w.norm(dim=1), torch.ones(12))
    trainable = [n for n, p in proj.named_parameters() if p.requires_grad]
    assert "last.parametrizations.weight.original0" not in trainable


def test_sharpening_increases_max_prob():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(200, 10, generator=g, dtype=torch.float64) * 0.05
    hot = temperature_softmax(logits, 0.1).probs.amax(-1)
    cold = temperature_softmax(logits, 0.04).probs.amax(-1)
    assert torch.all(cold > hot)


def test_update_center():
    center = torch.tensor([0.5, -1.0])
    batch = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert torch.equal(update_center(center, batch, 1.0), center)
    torch.testing.assert_close(update_center(center, batch, 0.0), torch.tensor([2.0, 3.0]))
    scalar = update_center(torch.zeros(1), torch.full((4, 1), 2.0), 0.9)
    assert scalar.item() == pytest.approx(0.2)


def _pair():
    torch.manual_seed(0)
    return torch.nn.Linear(3, 2).double(), torch.nn.Linear(3, 2).double()


def test_ema_identities():
    teacher, student = _pair()
    before = [p.clone() for p in teacher.parameters()]
    ema_update(teacher, student, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(teacher.parameters(), before))
    ema_update(teacher, student, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(teacher.parameters(), student.parameters()))


def test_ema_scalar_and_loop_oracle():
    t = torch.nn.Parameter(torch.ones(1, dtype=torch.float64))
    s = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    mt, ms = torch.nn.Module(), torch.nn.Module()
    mt.p, ms.p = t, s
    ema_update(mt, ms, 0.996)
    assert t.item() == 0.996

    teacher, student = _pair()
    expected = []
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        flat_t, flat_s = pt.detach().flatten().tolist(), ps.detach().flatten().tolist()
        expected.append([0.9 * a + (1 - 0.9) * b for a, b in zip(flat_t, flat_s)])
    ema_update(teacher, student, 0.9)
    for pt, exp in zip(teacher.parameters(), expected):
        assert pt.detach().flatten().tolist() == pytest.approx(exp, rel=1e-12, abs=1e-15)


def test_ema_rejects_bad_momentum():
    teacher, student = _pair()
    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)


def test_loss_uncertain_examples():
    k = 4
    teacher = dist(torch.full((3, k), 1 / k))
    student = dist(torch.full((3, k), 1 / k))
    assert loss_uncertain(student, teacher, torch.zeros(2, dtype=torch.bool)).item() == 0.0

    t_probs = torch.full((3, k), 1 / k, dtype=torch.float64)
    t_probs[2] = torch.tensor([0.0, 1.0, 0.0, 0.0])
    s_probs = torch.tensor([[0.25] * 4, [0.25] * 4, [0.1, 0.6, 0.2, 0.1]], dtype=torch.float64)
    mask = torch.tensor([False, True])
    assert loss_uncertain(dist(s_probs), dist(t_probs), mask).item() == pytest.approx(-math.log(0.6))


def test_loss_uncertain_self_is_entropy_sum():
    g = torch.Generator().manual_seed(3)
    p = torch.softmax(torch.randn(5, 6, generator=g, dtype=torch.float64), -1)
    mask = torch.tensor([True, False, True, True])
    entropies = -(p * p.log()).sum(-1)[1:]
    expected = entropies[mask].sum().item()
    assert loss_uncertain(dist(p), dist(p), mask).item() == pytest.approx(expected, rel=1e-12)
    assert loss_uncertain(dist(p), dist(p), mask, "mean").item() == pytest.approx(expected / 3, rel=1e-12)


def test_loss_certain_examples():
    onehot = torch.zeros(2, 8, dtype=torch.float64)
    onehot[0, 3] = 1.0
    uniform = torch.full((2, 8), 1 / 8, dtype=torch.float64)
    assert loss_certain(dist(onehot), dist(uniform)).item() == pytest.approx(2.0794415416798357)
    t = torch.tensor([[0.7, 0.3]], dtype=torch.float64)
    s = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert loss_certain(dist(t), dist(s)).item() == pytest.approx(0.6931471805599453, abs=1e-4)
    p = torch.softmax(torch.randn(3, 5, dtype=torch.float64), -1)
    assert loss_certain(dist(p), dist(p)).item() == pytest.approx(-(p[0] * p[0].log()).sum().item())


def test_losses_nonnegative():
    g = torch.Generator().manual_seed(4)
    for _ in range(200):
        a = torch.softmax(torch.randn(2, 7, 5, generator=g) * 3, -1)
        b = torch.softmax(torch.randn(2, 7, 5, generator=g) * 3, -1)
        mask = torch.rand(2, 6, generator=g) < 0.5
        da = Distribution(a.log(), a, a.log())
        db = Distribution(b.log(), b, b.log())
        assert loss_uncertain(da, db, mask) >= 0
        assert loss_certain(db, da) >= 0


def test_no_gradient_reaches_teacher():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(dim=16, heads=2, depth=1, ff_dim=16))
    agg = Aggregator(16, 16, depth=1)
    proj = Projector(16, 8, 8, 4)
    teacher = TeacherState(enc, agg, proj, out_dim=8)
    x = torch.rand(2, 64, 64, 3)
    zt, _ = teacher.encoder(x)
    t_dist = project_and_normalize(torch.cat([teacher.aggregator(zt), zt], 1), teacher.projector, 0.04,
                                   teacher.center)
    zs, _ = enc(x)
    s_dist = project_and_normalize(torch.cat([agg(zs), zs], 1), proj, 0.1)
    mask = torch.rand(2, 64) < 0.4
    (loss_uncertain(s_dist, t_dist, mask) + loss_certain(t_dist, s_dist)).backward()
    assert all(p.grad is None for p in teacher.parameters())
    assert not any(p.requires_grad for p in teacher.parameters())
    assert any(p.grad is not None for p in proj.parameters())


def _teacher(split):
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(dim=8, heads=2, depth=1, ff_dim=8))
    return TeacherState(enc, Aggregator(8, 8, depth=1), Projector(8, 4, 8, 4), out_dim=4,
                        center_momentum=0.0, split_center=split)


def test_split_center_tracks_class_and_patch_rows_separately():
    teacher = _teacher(split=True)
    logits = torch.zeros(2, 3, 4)
    logits[:, 0] = torch.tensor([4.0, 0.0, 0.0, 0.0])
    logits[:, 1:] = torch.tensor([0.0, 2.0, 0.0, 0.0])
    teacher.update_center(logits)
    assert teacher.center.tolist() == [4.0, 0.0, 0.0, 0.0]
    assert teacher.patch_center.tolist() == [0.0, 2.0, 0.0, 0.0]
    rows = teacher.row_center(3)
    assert rows.shape == (3, 4)
    assert torch.equal(rows[0], teacher.center) and torch.equal(rows[2], teacher.patch_center)
    # after centering every row of this batch is uniform
    d = temperature_softmax(logits, 0.04, rows)
    torch.testing.assert_close(d.probs, torch.full((2, 3, 4), 0.25))


def test_shared_center_pools_all_rows():
    teacher = _teacher(split=False)
    logits = torch.zeros(1, 4, 4)
    logits[0, 0, 0] = 4.0
    teacher.update_center(logits)
    assert teacher.center.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert torch.equal(teacher.row_center(4), teacher.center)
