from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from face_dualdict.config import LossWeights
from face_dualdict.errors import ShapeMismatchError
from face_dualdict.losses import (
    FeatureTaps,
    adversarial_losses,
    gram,
    mse_loss,
    perceptual_loss,
    reconstruction_loss,
    style_loss,
    total_loss,
)

SCALES = (1, 2, 4)


def _scores(value: float, batch: int = 3):
    return {r: torch.full((batch,), value, dtype=torch.float64) for r in SCALES}


def _ident(x):
    return [x]


# -----------------------------
# 重建类损失
# -----------------------------
def test_mse_cases():
    gt = torch.full((2, 3, 4, 4), 0.2, dtype=torch.float64)
    assert float(mse_loss(gt, gt)) == 0.0
    assert float(mse_loss(gt + 0.1, gt)) == pytest.approx(0.01, rel=1e-9)
    with pytest.raises(ShapeMismatchError):
        mse_loss(gt, gt[:, :, :2])


def test_perceptual_matches_hand_computation():
    def phi(x):
        return [2 * x, x.sum(dim=1, keepdim=True)]

    a, b = torch.rand(1, 3, 4, 4, dtype=torch.float64), torch.rand(1, 3, 4, 4, dtype=torch.float64)
    an, bn = a.numpy(), b.numpy()
    expected = np.mean((2 * an - 2 * bn) ** 2) + np.mean((an.sum(axis=1) - bn.sum(axis=1)) ** 2)
    assert float(perceptual_loss(a, b, phi)) == pytest.approx(expected, rel=1e-12)
    assert float(perceptual_loss(a, a, phi)) == 0.0


def test_perceptual_positive_with_feature_taps():
    taps = FeatureTaps()
    a, b = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    assert float(perceptual_loss(a, b, taps)) > 0
    assert float(perceptual_loss(a, a, taps)) == 0.0


def test_gram_is_symmetric_psd():
    g = gram(torch.randn(2, 5, 6, 6, dtype=torch.float64))
    assert torch.allclose(g, g.transpose(1, 2))
    assert float(torch.linalg.eigvalsh(g).min()) >= -1e-9


def test_style_hand_case():
    feat = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
    feat[0, 0, 0, 0] = 1.0
    feat[0, 1, 0, 1] = 1.0
    assert float(style_loss(feat, torch.zeros_like(feat), _ident)) == pytest.approx(0.5)
    assert float(style_loss(feat, feat, _ident)) == 0.0


def test_reconstruction_loss_combines_terms():
    taps = FeatureTaps()
    a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    w = LossWeights()
    expected = 300.0 * float(mse_loss(a, b)) + float(perceptual_loss(a, b, taps))
    assert float(reconstruction_loss(a, b, taps, w)) == pytest.approx(expected, rel=1e-5)


# -----------------------------
# 对抗损失
# -----------------------------
def test_discriminator_hinge_cases():
    assert float(adversarial_losses(_scores(1.0), _scores(-1.0), "D")) == 0.0
    assert float(adversarial_losses(_scores(0.0), _scores(0.0), "D")) == pytest.approx(6.0)
    assert float(adversarial_losses(_scores(3.0), _scores(-5.0), "D")) == 0.0


def test_generator_term_is_weighted_mean():
    c = 0.3
    assert float(adversarial_losses(None, _scores(c), "G")) == pytest.approx(-5.5 * c)


def test_adversarial_bad_calls():
    with pytest.raises(ShapeMismatchError):
        adversarial_losses(None, _scores(0.0), "D")
    with pytest.raises(ValueError):
        adversarial_losses(None, _scores(0.0), "X")


# -----------------------------
# 总损失
# -----------------------------
def _terms(mse=1.0, perceptual=1.0, style=1.0, adv_g=1.0):
    return {k: torch.tensor(v, dtype=torch.float64) for k, v in
            dict(mse=mse, perceptual=perceptual, style=style, adv_g=adv_g).items()}


def test_total_with_unit_terms():
    total, breakdown = total_loss(_terms(), LossWeights())
    assert float(total) == pytest.approx(302.1)
    assert breakdown["total"] == pytest.approx(302.1)
    assert breakdown["mse"] == 1.0


def test_total_zero_for_perfect_prediction():
    total, _ = total_loss(_terms(0.0, 0.0, 0.0, 0.0), LossWeights())
    assert float(total) == 0.0


def test_total_is_linear_in_mse_weight():
    w = LossWeights()
    doubled = dataclasses.replace(w, lambda_mse=2 * w.lambda_mse)
    terms = _terms(mse=0.04, perceptual=0.7, style=0.2, adv_g=-0.1)
    base, _ = total_loss(terms, w)
    more, _ = total_loss(terms, doubled)
    assert float(more - base) == pytest.approx(w.lambda_mse * 0.04)


# -----------------------------
# 特征网络
# -----------------------------
def test_feature_taps_are_frozen_and_reproducible():
    a, b = FeatureTaps(), FeatureTaps()
    a.train()
    assert not a.training
    assert not any(p.requires_grad for p in a.parameters())
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    taps = a(torch.rand(1, 3, 32, 32))
    assert [t.shape[1] for t in taps] == [16, 32, 64, 64]


# -----------------------------
# 梯度检查（float64）
# -----------------------------
def test_gradcheck_losses():
    taps = FeatureTaps().double()
    a = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    b = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    assert gradcheck(lambda x: mse_loss(x, b), (a,))
    assert gradcheck(lambda x: perceptual_loss(x, b, taps), (a,))
    assert gradcheck(lambda x: style_loss(x, b, taps), (a,))
    real = torch.randn(3, dtype=torch.float64, requires_grad=True)
    fake = torch.randn(3, dtype=torch.float64, requires_grad=True)
    assert gradcheck(
        lambda r, f: adversarial_losses({s: r for s in SCALES}, {s: f for s in SCALES}, "D"), (real, fake)
    )
    assert gradcheck(lambda f: adversarial_losses(None, {s: f for s in SCALES}, "G"), (fake,))
    scalars = tuple(torch.rand((), dtype=torch.float64, requires_grad=True) for _ in range(4))
    assert gradcheck(
        lambda m, p, s, g: total_loss(dict(mse=m, perceptual=p, style=s, adv_g=g), LossWeights())[0], scalars
    )
