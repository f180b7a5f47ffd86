import copy

import pytest
import torch

from enaet.networks import build_networks, ema_update, forward


def tiny(num_classes=3, counts=(8, 6, 4, 3, 4), **kw):
    torch.manual_seed(0)
    kw = {"width": 1, "depth": 10, "base_channels": 4, **kw}
    return build_networks(num_classes, counts, **kw)


def batch(n=2, size=16, seed=0):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_full_size_bundle():
    student, teacher = build_networks(27, [8, 6, 4, 3, 4], width=2, depth=28)
    assert [d.fc.out_features for d in student.decoders] == [8, 6, 4, 3, 4]
    assert student.classifier.fc.out_features == 27
    enc_out = student.encoder.out_channels
    for d in student.decoders:
        assert d.group[0].conv1.in_channels == 2 * enc_out
    assert len(student.encoder.group1) == 4  # (28 - 4) / 6 blocks per group


def test_teacher_starts_as_exact_copy():
    student, teacher = tiny()
    s, t = student.state_dict(), teacher.state_dict()
    assert s.keys() == t.keys()
    assert all(torch.equal(s[k], t[k]) for k in s)
    assert all(not p.requires_grad for p in teacher.parameters())


def test_two_class_head():
    student, _ = tiny(num_classes=2, counts=())
    assert student(batch()).shape == (2, 2)


@pytest.mark.parametrize("kw", [{"depth": 12}, {"depth": 4}, {"width": 0}])
def test_invalid_architecture(kw):
    with pytest.raises(ValueError):
        tiny(**kw)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        build_networks(1, [])


def test_forward_without_transforms():
    student, _ = tiny()
    pred, preds_t, params = forward(student, batch())
    assert pred.logits.shape == (2, 3)
    assert preds_t == [] and params == []


def test_forward_shapes_and_softmax_rows():
    student, _ = tiny()
    x = batch(1)
    pred, preds_t, params = forward(student, x, [batch(1, seed=i + 1) for i in range(5)])
    assert [p.shape for p in params] == [(1, 8), (1, 6), (1, 4), (1, 3), (1, 4)]
    for p in [pred, *preds_t]:
        assert torch.all(p.probs >= 0)
        assert torch.allclose(p.probs.sum(1), torch.ones(1), atol=1e-6)


def test_forward_shape_mismatch():
    student, _ = tiny()
    with pytest.raises(ValueError):
        forward(student, batch(2), [batch(3)])


def test_siamese_weights_shared():
    student, _ = tiny()
    student.eval()
    x, tx = batch(2, seed=1), batch(2, seed=2)
    before = forward(student, x, [tx])
    with torch.no_grad():
        student.encoder.stem.weight[0, 0, 0, 0] += 0.5
    after = forward(student, x, [tx])
    assert not torch.allclose(before[0].logits, after[0].logits)
    assert not torch.allclose(before[1][0].logits, after[1][0].logits)


def test_decoder_independence():
    student, _ = tiny()
    student.eval()
    x = batch(2)
    ts = [batch(2, seed=i + 3) for i in range(5)]
    before = forward(student, x, ts)
    with torch.no_grad():
        for p in student.decoders[1].parameters():
            p.add_(0.3)
    after = forward(student, x, ts)
    assert torch.equal(before[0].logits, after[0].logits)
    for k in (0, 2, 3, 4):
        assert torch.equal(before[2][k], after[2][k])
    assert not torch.allclose(before[2][1], after[2][1])


def test_ema_alpha_zero_copies_student():
    student, teacher = tiny()
    with torch.no_grad():
        for p in student.parameters():
            p.add_(torch.randn_like(p))
    ema_update(teacher, student, 0.0)
    s = student.state_dict()
    assert all(torch.equal(v, s[k]) for k, v in teacher.state_dict().items())


def test_ema_alpha_one_keeps_teacher():
    student, teacher = tiny()
    snapshot = copy.deepcopy(teacher.state_dict())
    with torch.no_grad():
        for p in student.parameters():
            p.add_(1.0)
    ema_update(teacher, student, 1.0)
    assert all(torch.equal(v, snapshot[k]) for k, v in teacher.state_dict().items())


def test_ema_geometric_closed_form():
    student, teacher = tiny(counts=())
    student.double()
    teacher.double()
    alpha, steps = 0.9, 25
    t0 = {k: v.clone() for k, v in teacher.state_dict().items()}
    with torch.no_grad():
        for p in student.parameters():
            p.copy_(torch.randn_like(p))
    s = {k: v.clone() for k, v in student.state_dict().items()}
    for _ in range(steps):
        ema_update(teacher, student, alpha)
    for name, _ in student.named_parameters():
        expected = t0[name] * alpha ** steps + s[name] * (1 - alpha ** steps)
        assert torch.max(torch.abs(teacher.state_dict()[name] - expected)) < 1e-10


def test_ema_is_contraction():
    student, teacher = tiny()
    with torch.no_grad():
        for p in student.parameters():
            p.add_(torch.randn_like(p))
    gap = {n: (t - s).abs() for (n, t), s in zip(teacher.named_parameters(), student.parameters())}
    ema_update(teacher, student, 0.7)
    for (n, t), s in zip(teacher.named_parameters(), student.parameters()):
        assert torch.all((t - s).abs() <= gap[n] + 1e-7)


def test_ema_shape_mismatch():
    a, _ = tiny(counts=())
    b, _ = tiny(num_classes=4, counts=())
    with pytest.raises(ValueError):
        ema_update(a, b, 0.5)
