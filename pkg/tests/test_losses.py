import math

import numpy as np
import pytest
import torch

from styleless.errors import ContractError, InvariantViolationError
from styleless.losses import (
    LossWeights,
    adversarial_losses,
    class_balanced_weights,
    cycle_loss,
    l1_image,
    l1_zero,
    rec_loss,
    seg_ct_loss,
    seg_loss,
    total_loss,
    weighted_cross_entropy,
    zero_loss,
    zero_style_loss,
    zero_trans_loss,
)
from util import autograd_gradient, ce_oracle, fd_gradient

T = lambda x: torch.tensor(x, dtype=torch.float64)


def rand_probs(rng, shape):
    raw = torch.tensor(rng.random(shape) + 0.05, dtype=torch.float64)
    return raw / raw.sum(dim=0, keepdim=True)


def rand_onehot(rng, k, h, w, unlabeled_frac=0.25):
    idx = rng.integers(0, k, size=(h, w))
    idx[rng.random((h, w)) < unlabeled_frac] = 255
    oh = np.zeros((k, h, w))
    for c in range(k):
        oh[c][idx == c] = 1
    return torch.tensor(oh, dtype=torch.float64)


# --- zero losses ---


def test_l1_zero_values():
    assert l1_zero(T([0.0, 0.0])).item() == 0.0
    assert l1_zero(T([0.5, -0.5])).item() == 0.5
    code = T([0.3, -0.7, 0.1])
    assert math.isclose(l1_zero(2 * code).item(), 2 * l1_zero(code).item(), rel_tol=1e-12)


def test_zero_loss_values():
    assert zero_loss(T([0.0, 0.0]), T([0.0, 0.0])).item() == 0.0
    assert zero_loss(T([1.0, 0.0]), T([0.0, 1.0])).item() == 1.0
    a, b = T([0.2, -0.4]), T([0.9, 0.1])
    assert zero_loss(a, b).item() == zero_loss(b, a).item()


def test_zero_trans_mirrors_zero():
    a, b = T([0.3, 0.3]), T([-0.1, 0.5])
    assert zero_trans_loss(a, b).item() == zero_loss(a, b).item()


# --- cross entropy ---


def test_ce_one_pixel_case():
    p = T([[[0.8]], [[0.2]]])
    y = T([[[1.0]], [[0.0]]])
    got = weighted_cross_entropy(p, y, T([1.0, 1.0])).item()
    assert abs(got - (-math.log(0.8))) < 1e-10


def test_ce_perfect_prediction_is_zero():
    y = rand_onehot(np.random.default_rng(0), 3, 4, 4, unlabeled_frac=0.0)
    assert weighted_cross_entropy(y, y).item() == 0.0


def test_ce_no_labeled_pixels():
    p = rand_probs(np.random.default_rng(1), (3, 4, 4))
    y = torch.zeros(3, 4, 4, dtype=torch.float64)
    assert weighted_cross_entropy(p, y).item() == 0.0


def test_ce_matches_loglikelihood_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        k = int(rng.integers(2, 6))
        p = rand_probs(rng, (k, 5, 4))
        y = rand_onehot(rng, k, 5, 4)
        w = rng.random(k) + 0.5
        expect = ce_oracle(
            p.permute(1, 2, 0).numpy(), y.permute(1, 2, 0).numpy().astype(int), w
        )
        got = weighted_cross_entropy(p, y, torch.tensor(w)).item()
        assert abs(got - expect) < 1e-10


def test_ce_uniform_weight_equals_unweighted():
    rng = np.random.default_rng(3)
    p = rand_probs(rng, (4, 4, 4))
    y = rand_onehot(rng, 4, 4, 4)
    assert (
        abs(
            weighted_cross_entropy(p, y).item()
            - weighted_cross_entropy(p, y, torch.ones(4, dtype=torch.float64)).item()
        )
        < 1e-15
    )


def test_ce_shape_mismatch():
    with pytest.raises(ContractError):
        weighted_cross_entropy(torch.rand(3, 4, 4), torch.rand(3, 4, 5))
    with pytest.raises(ContractError):
        weighted_cross_entropy(torch.rand(3, 4, 4), torch.rand(3, 4, 4), torch.ones(2))


def test_ce_batched_equals_stacked_mean():
    rng = np.random.default_rng(4)
    p1, p2 = rand_probs(rng, (3, 4, 4)), rand_probs(rng, (3, 4, 4))
    y1, y2 = rand_onehot(rng, 3, 4, 4), rand_onehot(rng, 3, 4, 4)
    batched = weighted_cross_entropy(torch.stack([p1, p2]), torch.stack([y1, y2])).item()
    n1, n2 = y1.sum().item(), y2.sum().item()
    merged = (
        weighted_cross_entropy(p1, y1).item() * n1
        + weighted_cross_entropy(p2, y2).item() * n2
    ) / (n1 + n2)
    assert abs(batched - merged) < 1e-12


# --- seg losses ---


def test_seg_loss_requires_identical_label_object():
    rng = np.random.default_rng(5)
    p = rand_probs(rng, (3, 4, 4))
    y = rand_onehot(rng, 3, 4, 4)
    ok = seg_loss(p, y, p, y).item()
    assert abs(ok - 2 * weighted_cross_entropy(p, y).item()) < 1e-12
    with pytest.raises(InvariantViolationError):
        seg_loss(p, y, p, y.clone())


def test_seg_loss_zero_at_perfect():
    y = rand_onehot(np.random.default_rng(6), 3, 4, 4, unlabeled_frac=0.0)
    assert seg_loss(y, y, y, y).item() == 0.0


def test_zero_style_loss_is_sum():
    parts = [T(0.3), T(0.5), T(1.2)]
    assert zero_style_loss(*parts).item() == pytest.approx(2.0, abs=1e-15)
    assert zero_style_loss(T(0.0), T(0.0), T(0.0)).item() == 0.0


# --- image losses ---


def test_l1_image_values():
    a = torch.zeros(3, 4, 4, dtype=torch.float64)
    b = torch.ones(3, 4, 4, dtype=torch.float64)
    assert l1_image(a, a).item() == 0.0
    assert l1_image(b, a).item() == 1.0
    rng = np.random.default_rng(7)
    x, y = T(rng.random((3, 4, 4))), T(rng.random((3, 4, 4)))
    assert l1_image(x, y).item() == l1_image(y, x).item()


def test_cycle_and_rec_compose():
    rng = np.random.default_rng(8)
    ims = [T(rng.random((3, 4, 4))) for _ in range(4)]
    expect = l1_image(ims[0], ims[1]) + l1_image(ims[2], ims[3])
    assert cycle_loss(ims[0], ims[1], ims[2], ims[3]).item() == expect.item()
    assert rec_loss(ims[0], ims[1], ims[2], ims[3]).item() == expect.item()
    assert cycle_loss(ims[0], ims[0], ims[2], ims[2]).item() == 0.0
    assert rec_loss(ims[1], ims[1], ims[3], ims[3]).item() == 0.0


# --- adversarial ---


def test_adversarial_optima():
    ones = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    zeros = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    assert adversarial_losses(ones, zeros, "discriminator").item() == 0.0
    assert adversarial_losses(None, ones, "generator").item() == 0.0
    assert adversarial_losses(zeros, ones, "discriminator").item() == 2.0
    with pytest.raises(ContractError):
        adversarial_losses(ones, zeros, "judge")
    with pytest.raises(ContractError):
        adversarial_losses(None, zeros, "discriminator")


# --- seg_ct / total ---


def test_seg_ct_is_weighted_ce():
    rng = np.random.default_rng(9)
    p = rand_probs(rng, (3, 4, 4))
    y = rand_onehot(rng, 3, 4, 4)
    w = torch.tensor(rng.random(3) + 0.5)
    assert seg_ct_loss(p, y, w).item() == weighted_cross_entropy(p, y, w).item()


def test_total_loss_composition():
    terms = dict(
        zero=T(0.1),
        zero_trans=T(0.2),
        seg=T(0.3),
        cycle=T(0.4),
        rec=T(0.5),
        adv_img=T(0.6),
        adv_out=T(0.7),
        seg_ct=T(0.8),
    )
    zeroed = LossWeights(zero=0, zero_trans=0, seg=0, cycle=0, rec=0, adv_img=0, adv_out=0, seg_ct=0)
    assert total_loss(zeroed, **terms).item() == 0.0
    for name in terms:
        kwargs = {k: 0.0 for k in terms}
        kwargs[name] = terms[name]
        w = LossWeights(**{**{k: 0.0 for k in terms}, name: 1.0})
        assert total_loss(w, **kwargs).item() == terms[name].item()
        w2 = LossWeights(**{**{k: 0.0 for k in terms}, name: 3.0})
        assert total_loss(w2, **kwargs).item() == pytest.approx(3 * terms[name].item(), rel=1e-15)


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(zero=-1.0)
    with pytest.raises(ContractError):
        LossWeights(class_weights=torch.tensor([1.0, -2.0]))


# --- class-balanced weights ---


def test_class_balanced_formula():
    w = class_balanced_weights(torch.tensor([1000.0]), beta=0.999)
    # single class normalizes to 1; check the unnormalized value directly
    unnorm = (1 - 0.999) / (1 - 0.999**1000)
    assert abs(unnorm - 1.582e-3) < 1e-6
    assert w.item() == 1.0
    w2 = class_balanced_weights(torch.tensor([1000.0, 10.0]), beta=0.999)
    expect = torch.tensor([unnorm, 0.001 / (1 - 0.999**10)], dtype=torch.float64)
    expect = expect / expect.mean()
    assert torch.allclose(w2, expect, rtol=0, atol=1e-12)


def test_class_balanced_absent_class():
    w = class_balanced_weights(torch.tensor([100.0, 0.0, 50.0]))
    assert w[1] == 0.0
    present = w[torch.tensor([0, 2])]
    assert abs(present.mean().item() - 1.0) < 1e-12
    with pytest.raises(ContractError):
        class_balanced_weights(torch.tensor([1.0]), beta=1.0)


# --- properties: nonnegativity and gradients ---


def test_all_losses_nonnegative():
    rng = np.random.default_rng(10)
    for _ in range(10):
        p, y = rand_probs(rng, (3, 4, 4)), rand_onehot(rng, 3, 4, 4)
        a, b = T(rng.random((3, 4, 4))), T(rng.random((3, 4, 4)))
        code = T(rng.standard_normal(8))
        scores = T(rng.standard_normal((1, 1, 2, 2)))
        assert weighted_cross_entropy(p, y).item() >= 0.0
        assert l1_zero(code).item() >= 0.0
        assert l1_image(a, b).item() >= 0.0
        assert adversarial_losses(scores, scores, "discriminator").item() >= 0.0
        assert adversarial_losses(None, scores, "generator").item() >= 0.0


def check_gradient(fn, x):
    got = autograd_gradient(fn, x)
    fd = fd_gradient(fn, x, step=1e-5)
    np.testing.assert_allclose(got.numpy(), fd.numpy(), rtol=1e-4, atol=1e-8)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    k = 3
    p = rand_probs(rng, (k, 4, 4)).clamp(0.01, 0.99)
    y = rand_onehot(rng, k, 4, 4)
    w = torch.tensor(rng.random(k) + 0.5)
    check_gradient(lambda: weighted_cross_entropy(p, y, w), p)

    code = T(rng.standard_normal(8) + 0.2)
    code[code.abs() < 0.05] = 0.1  # stay away from the |x| kink
    check_gradient(lambda: l1_zero(code), code)

    a = T(rng.random((3, 4, 4)))
    b = T(rng.random((3, 4, 4)) + 1.5)  # keep a-b away from the kink
    check_gradient(lambda: l1_image(a, b), a)

    scores = T(rng.standard_normal((1, 1, 4, 4)))
    fake = T(rng.standard_normal((1, 1, 4, 4)))
    check_gradient(lambda: adversarial_losses(scores, fake, "discriminator"), scores)
    check_gradient(lambda: adversarial_losses(None, fake, "generator"), fake)
