import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emso.losses import (
    ForgetSequence,
    LossConfig,
    SequenceBatch,
    di_loss,
    di_teacher_distribution,
    em_loss,
    ga_loss,
    gradient_scale_profile,
    grad_em_logits,
    grad_ls_logits,
    grad_nll_logits,
    kl_loss,
    ls_loss,
    nll_loss,
)
from emso.model import Vocabulary
from emso.tensor import log_softmax, numeric_gradient, softmax

D = torch.float64


def logits_of(p):
    return torch.tensor(p, dtype=D).log()


def fd(f, h):
    return numeric_gradient(f, h, step=1e-6, batched=True)


# loss values


def test_em_loss_examples():
    V = 258
    onehot = torch.full((3, V), -1e4, dtype=D)
    onehot[:, 7] = 0
    assert abs(float(em_loss(onehot))) < 1e-12
    uniform = torch.zeros(5, V, dtype=D)
    assert float(em_loss(uniform)) == pytest.approx(-math.log(258), abs=1e-12)
    assert float(em_loss(uniform)) == pytest.approx(-5.5530, abs=1e-4)
    # oracle: sum p ln p by hand
    expected = 0.9 * math.log(0.9) + 0.1 * math.log(0.1)
    assert float(em_loss(logits_of([[0.9, 0.1]]))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-0.3251, abs=5e-5)


def test_nll_loss_examples():
    V = 258
    tgt = torch.tensor([3, 9])
    perfect = torch.full((2, V), -1e4, dtype=D)
    perfect[0, 3] = perfect[1, 9] = 0
    assert abs(float(nll_loss(perfect, tgt))) < 1e-12
    assert float(nll_loss(torch.zeros(2, V, dtype=D), tgt)) == pytest.approx(math.log(258), abs=1e-12)
    assert float(nll_loss(logits_of([[0.5, 0.25, 0.25]]), torch.tensor([0]))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(ga_loss(logits_of([[0.5, 0.5]]), torch.tensor([1]))) == pytest.approx(-math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        nll_loss(torch.zeros(1, 4), torch.tensor([4]))


def test_ls_loss_examples():
    uniform = torch.zeros(1, 258, dtype=D)
    # oracle: -gamma * sum_j log(1/258) = 258 ln 258
    expected = 258 * math.log(258)
    assert float(ls_loss(uniform, 1.0)) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(1432.6636, abs=1e-4)
    h = torch.randn(4, 10, dtype=D, generator=torch.Generator().manual_seed(0))
    assert float(ls_loss(h, 2.0)) == pytest.approx(2 * float(ls_loss(h, 1.0)), rel=1e-12)
    with pytest.raises(ValueError):
        ls_loss(h, 0.0)


def test_ls_loss_minimized_at_uniform():
    torch.manual_seed(0)
    h = torch.randn(6, dtype=D, requires_grad=True)
    opt = torch.optim.SGD([h], lr=0.01)
    for _ in range(3000):
        opt.zero_grad()
        ls_loss(h[None], 1.0).backward()
        opt.step()
    assert torch.allclose(softmax(h.detach()), torch.full((6,), 1 / 6, dtype=D), atol=1e-6)


def test_loss_config_validation():
    assert LossConfig("LS", 1.0).gamma == 1.0
    with pytest.raises(ValueError):
        LossConfig("LS")
    with pytest.raises(ValueError):
        LossConfig("XX")


def test_masked_reduction_is_per_sequence_mean():
    logits = torch.zeros(2, 3, 4, dtype=D)
    logits[0, 0] = torch.tensor([5.0, 0, 0, 0])
    mask = torch.tensor([[True, False, False], [True, True, True]])
    per0 = float(em_loss(logits[0, :1]))
    per1 = -math.log(4)
    assert float(em_loss(logits, mask)) == pytest.approx((per0 + per1) / 2, abs=1e-12)


# closed-form gradients


def test_grad_ls_examples():
    assert torch.equal(grad_ls_logits(torch.full((8,), 1 / 8, dtype=D), 1.0), torch.zeros(8, dtype=D))
    p = torch.tensor([0.9, 0.1], dtype=D)
    h = p.log()
    num = fd(lambda x: ls_loss(x, 1.0) if x.dim() == 1 else -log_softmax(x).sum(-1), h)
    assert torch.allclose(num, torch.tensor([0.8, -0.8], dtype=D), atol=1e-6)
    assert torch.allclose(grad_ls_logits(p, 1.0), torch.tensor([0.8, -0.8], dtype=D), atol=1e-12)


def test_grad_em_examples():
    assert torch.allclose(grad_em_logits(torch.full((5,), 0.2, dtype=D)), torch.zeros(5, dtype=D), atol=1e-15)
    p = torch.tensor([0.9, 0.1], dtype=D)
    num = fd(lambda x: (softmax(x) * log_softmax(x)).sum(-1), p.log())
    assert torch.allclose(num, torch.tensor([0.19775, -0.19775], dtype=D), atol=5e-6)
    assert torch.allclose(grad_em_logits(p), num, atol=1e-8)


def test_grad_nll_examples():
    assert torch.equal(grad_nll_logits(torch.tensor([0.0, 1.0, 0.0], dtype=D), 1), torch.zeros(3, dtype=D))
    p = torch.tensor([0.7, 0.3], dtype=D)
    num = fd(lambda x: -log_softmax(x)[..., 0], p.log())
    assert torch.allclose(num, torch.tensor([-0.3, 0.3], dtype=D), atol=1e-8)
    assert torch.allclose(grad_nll_logits(p, 0), torch.tensor([-0.3, 0.3], dtype=D), atol=1e-15)
    with pytest.raises(ValueError):
        grad_nll_logits(p, 2)


def test_closed_forms_reject_bad_distributions():
    for f in (lambda p: grad_em_logits(p), lambda p: grad_ls_logits(p, 1.0), lambda p: grad_nll_logits(p, 0)):
        with pytest.raises(ValueError):
            f(torch.tensor([0.5, 0.6], dtype=D))
        with pytest.raises(ValueError):
            f(torch.tensor([1.5, -0.5], dtype=D))


prob_vectors = st.integers(2, 40).flatmap(
    lambda V: st.lists(st.floats(-6, 6, allow_nan=False), min_size=V, max_size=V)
)


@settings(max_examples=150, deadline=None)
@given(prob_vectors, st.data())
def test_closed_forms_match_autodiff(h, data):
    h = torch.tensor(h, dtype=D)
    p = softmax(h)
    t = data.draw(st.integers(0, len(h) - 1))
    gamma = data.draw(st.floats(0.1, 5))
    x = h.clone().requires_grad_(True)
    for loss, closed in (
        (lambda z: ls_loss(z[None], gamma), grad_ls_logits(p, gamma)),
        (lambda z: em_loss(z[None]), grad_em_logits(p)),
        (lambda z: nll_loss(z[None], torch.tensor([t])), grad_nll_logits(p, t)),
    ):
        (g,) = torch.autograd.grad(loss(x), [x])
        scale = max(float(g.abs().max()), 1e-12)
        assert float((g - closed).abs().max()) / scale < 1e-4 or float((g - closed).abs().max()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=2, max_size=30), st.floats(-100, 100))
def test_em_loss_shift_invariant(h, c):
    h = torch.tensor(h, dtype=D)[None]
    assert float(em_loss(h + c)) == pytest.approx(float(em_loss(h)), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=30))
def test_minimizer_equivalence_only_at_uniform(w):
    p = torch.tensor(w, dtype=D)
    p = p / p.sum()
    V = len(w)
    dev = float((p - 1 / V).abs().max())
    g_ls = float(grad_ls_logits(p, 1.0).abs().max())
    g_em = float(grad_em_logits(p).abs().max())
    if dev > 1e-3:
        assert g_ls > 1e-8 and g_em > 1e-8
    u = torch.full((V,), 1 / V, dtype=D)
    assert float(grad_ls_logits(u, 1.0).abs().max()) < 1e-8
    assert float(grad_em_logits(u).abs().max()) < 1e-8


# gradient-scale profile


def test_gradient_scale_examples():
    row = gradient_scale_profile([0.01])[0]
    assert row.ls_factor == pytest.approx(100.0)
    assert row.em_factor == pytest.approx(abs(math.log(0.01) + 1))
    assert row.em_factor == pytest.approx(3.605, abs=5e-4)
    assert row.ratio == pytest.approx(27.7, abs=0.05)
    half = gradient_scale_profile([0.5])[0]
    assert half.ratio == pytest.approx(2 / abs(math.log(0.5) + 1))
    assert half.ratio == pytest.approx(6.52, abs=5e-3)
    with pytest.raises(ValueError):
        gradient_scale_profile([0.0])
    with pytest.raises(ValueError):
        gradient_scale_profile([1.0])


def test_gradient_scale_bounds():
    grid = [10 ** (-k / 4) for k in range(1, 40)]
    rows = gradient_scale_profile(grid)
    p_min = min(grid)
    for r in rows:
        assert r.em_factor <= 1 + abs(math.log(p_min))
    assert max(r.ls_factor for r in rows) >= 1 / p_min
    V = 258
    for p in (1e-9, 1e-6, 1 / V, 0.3, 0.99):
        assert gradient_scale_profile([p])[0].em_factor <= 1 + math.log(1 / p) + 1e-12


# distillation baselines


def test_di_teacher_example():
    q = di_teacher_distribution(torch.tensor([[2.0, 1.0, 1.0]], dtype=D), torch.tensor([0]), 3.0)[0]
    z = math.exp(2) + 2 * math.exp(4)
    expected = [math.exp(2) / z, math.exp(4) / z, math.exp(4) / z]
    assert q.tolist() == pytest.approx(expected, abs=1e-12)
    assert q.tolist() == pytest.approx([0.0634, 0.4683, 0.4683], abs=5e-5)


def test_di_limits():
    t = torch.tensor([[2.0, 1.0, 1.0]], dtype=D)
    tgt = torch.tensor([0])
    assert torch.allclose(di_teacher_distribution(t, tgt, 0.0), softmax(t))
    assert float(di_teacher_distribution(t, tgt, 60.0)[0, 0]) < 1e-20
    s = torch.randn(1, 3, dtype=D, generator=torch.Generator().manual_seed(0))
    # gamma 0 is plain distillation: CE(softmax(t), student)
    expected = -(softmax(t) * log_softmax(s)).sum()
    assert float(di_loss(s, t, tgt, 0.0)) == pytest.approx(float(expected))
    with pytest.raises(ValueError):
        di_loss(s, t[:, :2], tgt, 1.0)


def test_kl_loss_zero_when_equal():
    h = torch.randn(2, 5, 7, dtype=D, generator=torch.Generator().manual_seed(1))
    assert abs(float(kl_loss(h, h))) < 1e-12
    assert float(kl_loss(h, h.flip(-1))) > 0


# sequences and batches


def test_forget_sequence_split():
    s = ForgetSequence.from_text("abcdefgh")
    assert s.p == 4 and s.q == 4
    assert s.prefix == tuple(b"abcd") and s.continuation == tuple(b"efgh")
    with pytest.raises(ValueError):
        ForgetSequence((1, 2, 3), 3)
    with pytest.raises(ValueError):
        ForgetSequence((1, 2, 3), 0)


def test_sequence_batch_padding_and_continuation_index():
    a = ForgetSequence((1, 2, 3, 4, 5), 2)
    b = ForgetSequence((6, 7, 8), 1)
    batch = SequenceBatch([a, b])
    assert batch.tokens.tolist() == [[1, 2, 3, 4, 5], [6, 7, 8, Vocabulary.pad, Vocabulary.pad]]
    pos, tgt, mask = batch.continuation_index()
    assert mask.tolist() == [[True, True, True], [True, True, False]]
    assert tgt[0].tolist() == [3, 4, 5]
    assert tgt[1, :2].tolist() == [7, 8]
    assert pos[0].tolist() == [1, 2, 3]
    assert pos[1, :2].tolist() == [0, 1]
