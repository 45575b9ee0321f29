import math

import numpy as np
import pytest
import torch

from tissuegen.data import PairSample
from tissuegen.losses import (
    LossWeights,
    cgan_loss,
    cyclegan_objective,
    hd_objective,
    l1_loss,
    pix2pix_objective,
)
from tissuegen.masks import BinaryMask
from tissuegen.nets import build_discriminator, build_generator, mask_to_tensor, \
    multiscale_forward
from tissuegen.nets import DiscriminatorSpec

from helpers import check_grads_against_fd, rel_err, toy_disc_spec, \
    toy_residual_spec, toy_unet_spec

LN2 = math.log(2.0)


def bce_scalar(logit, target):
    p = 1.0 / (1.0 + math.exp(-logit))
    p = min(max(p, 1e-12), 1 - 1e-12)
    return -(target * math.log(p) + (1 - target) * math.log(1 - p))


# ---------------------------------------------------------------- cgan / l1

def test_cgan_loss_at_zero_logits_is_ln2():
    z = torch.zeros(1, 1, 4, 4)
    loss_d, loss_g = cgan_loss(z, z)
    assert abs(float(loss_d) - LN2) < 1e-6
    assert abs(float(loss_g) - LN2) < 1e-6


def test_cgan_loss_perfect_discriminator_goes_to_zero():
    real = torch.full((1, 1, 3, 3), 20.0)
    fake = torch.full((1, 1, 3, 3), -20.0)
    loss_d, _ = cgan_loss(real, fake)
    assert float(loss_d) < 1e-6


def test_cgan_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(0)
    real = rng.normal(size=(2, 3))
    fake = rng.normal(size=(2, 3))
    loss_d, loss_g = cgan_loss(torch.tensor(real), torch.tensor(fake))
    d_hand = np.mean([bce_scalar(v, 1.0) for v in real.ravel()]) / 2 \
        + np.mean([bce_scalar(v, 0.0) for v in fake.ravel()]) / 2
    g_hand = np.mean([bce_scalar(v, 1.0) for v in fake.ravel()])
    assert rel_err(float(loss_d), d_hand) < 1e-10
    assert rel_err(float(loss_g), g_hand) < 1e-10


def test_cgan_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        cgan_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_l1_loss_values():
    a = torch.ones(3, 4)
    b = -torch.ones(3, 4)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(a, b)) == 2.0


def test_l1_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    hand = np.abs(a - b).mean()
    assert rel_err(float(l1_loss(torch.tensor(a), torch.tensor(b))), hand) < 1e-12


def test_l1_loss_properties():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b, c = (torch.tensor(rng.normal(size=(3, 3))) for _ in range(3))
        ab = float(l1_loss(a, b))
        assert rel_err(ab, float(l1_loss(b, a))) < 1e-12
        assert ab <= float(l1_loss(a, c)) + float(l1_loss(c, b)) + 1e-12
        k = float(rng.normal())
        assert abs(float(l1_loss(k * a, k * b)) - abs(k) * ab) < 1e-9


# ---------------------------------------------------------------- pix2pix

class StubDisc:
    """Constant-logit discriminator stub honoring the (score, features) contract."""

    def __init__(self, logit=0.0, shape=(1, 1, 3, 3)):
        self.logit = logit
        self.shape = shape

    def __call__(self, x):
        return torch.full(self.shape, self.logit, dtype=x.dtype), [x]


def checker_pair(h=8, w=8):
    plane = np.indices((h, w)).sum(axis=0) % 2
    fine = BinaryMask(plane.astype(np.uint8))
    return PairSample(coarse=fine, fine=fine)


def test_pix2pix_perfect_generator_at_neutral_disc():
    pair = checker_pair()
    target = mask_to_tensor(pair.fine)
    G = lambda x, rng=None: target.clone()
    out = pix2pix_objective(G, StubDisc(0.0), pair, LossWeights(lambda_l1=100.0))
    assert abs(float(out.loss_g.detach()) - LN2) < 1e-6
    assert out.parts["loss_g_l1"] == 0.0


def test_pix2pix_lambda_zero_is_pure_cgan():
    pair = checker_pair()
    G = lambda x, rng=None: -mask_to_tensor(pair.fine)
    out = pix2pix_objective(G, StubDisc(0.3), pair, LossWeights(lambda_l1=0.0))
    assert rel_err(float(out.loss_g.detach()), bce_scalar(0.3, 1.0)) < 1e-6


def test_pix2pix_composes_from_tested_pieces():
    torch.manual_seed(0)
    pair = checker_pair(16, 16)
    G = build_generator(toy_unet_spec(), seed=1)
    D = build_discriminator(toy_disc_spec(in_channels=2), seed=2)
    weights = LossWeights(lambda_l1=100.0)
    rng_seed = 11
    out = pix2pix_objective(G, D, pair, weights,
                            rng=torch.Generator().manual_seed(rng_seed))
    x = mask_to_tensor(pair.coarse)
    y = mask_to_tensor(pair.fine)
    fake = G(x, torch.Generator().manual_seed(rng_seed))
    d_real, _ = D(torch.cat([x, y], dim=1))
    d_fake, _ = D(torch.cat([x, fake], dim=1))
    loss_d_hand, loss_g_adv_hand = cgan_loss(d_real, d_fake)
    loss_g_hand = float(loss_g_adv_hand.detach()) + 100.0 * float(l1_loss(y, fake).detach())
    assert rel_err(float(out.loss_g.detach()), loss_g_hand) < 1e-6
    assert rel_err(float(out.loss_d.detach()), float(loss_d_hand.detach())) < 1e-6


# ---------------------------------------------------------------- cyclegan

def test_cycle_term_zero_for_identity_generators():
    ident = lambda t, rng=None: t
    x = torch.rand(1, 1, 4, 4)
    y = torch.rand(1, 1, 4, 4)
    out = cyclegan_objective(ident, ident, StubDisc(0.0), StubDisc(0.0), x, y,
                             LossWeights(lambda_cyc=10.0))
    assert out.parts["loss_g_cyc"] == 0.0
    assert abs(float(out.loss_g_total.detach()) - 2 * LN2) < 1e-6


def test_cyclegan_lambda_zero_is_pure_adversarial():
    rng = torch.Generator().manual_seed(0)
    G = build_generator(toy_unet_spec(dropout=0.0), seed=3)
    F = build_generator(toy_unet_spec(dropout=0.0), seed=4)
    D = StubDisc(0.7)
    x = torch.rand(1, 1, 16, 16, generator=rng) * 2 - 1
    y = torch.rand(1, 1, 16, 16, generator=rng) * 2 - 1
    out = cyclegan_objective(G, F, D, D, x, y, LossWeights(lambda_cyc=0.0))
    assert rel_err(float(out.loss_g_total.detach()), 2 * bce_scalar(0.7, 1.0)) < 1e-6


def test_cyclegan_composes_from_tested_pieces():
    G = build_generator(toy_unet_spec(dropout=0.0), seed=5)
    F = build_generator(toy_unet_spec(dropout=0.0), seed=6)
    D_X = build_discriminator(toy_disc_spec(in_channels=1), seed=7)
    D_Y = build_discriminator(toy_disc_spec(in_channels=1), seed=8)
    gen = torch.Generator().manual_seed(1)
    x = (torch.rand(1, 1, 16, 16, generator=gen) > 0.5).float() * 2 - 1
    y = (torch.rand(1, 1, 16, 16, generator=gen) > 0.5).float() * 2 - 1
    weights = LossWeights(lambda_cyc=10.0)
    out = cyclegan_objective(G, F, D_X, D_Y, x, y, weights)
    fake_y, fake_x = G(x, None), F(y, None)
    adv = float(cgan_loss(D_Y(fake_y)[0], D_Y(fake_y)[0])[1].detach()) \
        + float(cgan_loss(D_X(fake_x)[0], D_X(fake_x)[0])[1].detach())
    cyc = float(l1_loss(F(fake_y, None), x).detach()) + float(l1_loss(G(fake_x, None), y).detach())
    assert rel_err(float(out.loss_g_total.detach()), adv + 10.0 * cyc) < 1e-6
    loss_dy_hand, _ = cgan_loss(D_Y(y)[0], D_Y(fake_y)[0])
    assert rel_err(float(out.loss_dy.detach()), float(loss_dy_hand.detach())) < 1e-6


# ---------------------------------------------------------------- hd

class StubMultiD:
    """Two-scale stub: constant logits, features echo the input."""

    class _Spec:
        n_scales = 2

    spec = _Spec()

    def __init__(self, logit=0.0):
        self.logit = logit

    def __call__(self, x):
        score = torch.full((1, 1, 2, 2), self.logit, dtype=x.dtype)
        return [(score, [x]), (score, [x[..., ::2, ::2]])]


def test_hd_fake_equals_real_zeroes_fm_and_mse():
    x = torch.rand(1, 1, 16, 32)
    real = torch.rand(1, 3, 16, 32) * 2 - 1
    G = lambda t, rng=None: real.clone()
    out = hd_objective(G, StubMultiD(0.4), x, real, LossWeights())
    assert out.parts["loss_g_fm"] == 0.0
    assert out.parts["loss_g_mse"] == 0.0
    assert rel_err(out.parts["loss_g_adv"], 2 * bce_scalar(0.4, 1.0)) < 1e-6


def test_hd_neutral_scores_give_ln2_terms():
    x = torch.rand(1, 1, 16, 32)
    real = torch.rand(1, 3, 16, 32) * 2 - 1
    G = lambda t, rng=None: real.clone()
    out = hd_objective(G, StubMultiD(0.0), x, real, LossWeights())
    assert abs(out.parts["loss_g_adv"] - 2 * LN2) < 1e-6
    assert abs(out.parts["loss_d"] - 2 * LN2) < 1e-6
    assert out.parts["loss_g_mse"] == 0.0


def test_hd_requires_two_scales():
    D1 = build_discriminator(toy_disc_spec(in_channels=4, n_scales=1), seed=0)
    x = torch.rand(1, 1, 16, 32)
    real = torch.rand(1, 3, 16, 32)
    with pytest.raises(ValueError, match="2-scale"):
        hd_objective(lambda t, rng=None: real, D1, x, real, LossWeights())


def test_hd_composes_from_tested_pieces():
    G = build_generator(toy_residual_spec(), seed=9)
    D = build_discriminator(DiscriminatorSpec(in_channels=4, n_layers=1,
                                              base_width=2, n_scales=2), seed=10)
    gen = torch.Generator().manual_seed(2)
    x = (torch.rand(1, 1, 16, 32, generator=gen) > 0.5).float() * 2 - 1
    real = torch.rand(1, 3, 16, 32, generator=gen) * 2 - 1
    out = hd_objective(G, D, x, real, LossWeights())
    fake = G(x, None)
    outs_real = multiscale_forward(D, torch.cat([x, real], dim=1))
    outs_fake = multiscale_forward(D, torch.cat([x, fake], dim=1))
    adv = mse = fm = 0.0
    for (sr, fr), (sf, ff) in zip(outs_real, outs_fake):
        adv += float(cgan_loss(sf, sf)[1].detach())
        mse += float(((torch.sigmoid(sf).mean() - torch.sigmoid(sr).mean()) ** 2).detach())
        fm += float(np.mean([float(l1_loss(a, b).detach()) for a, b in zip(fr, ff)]))
    assert rel_err(float(out.loss_g.detach()), adv + mse + fm) < 1e-6


# ---------------------------------------------------------------- gradients

def test_pix2pix_objective_generator_gradcheck():
    pair = checker_pair(16, 16)
    G = build_generator(toy_unet_spec(), seed=11).double()
    D = build_discriminator(toy_disc_spec(in_channels=2), seed=12).double()
    weights = LossWeights(lambda_l1=10.0)

    def loss_fn():
        pair_t = PairSample(pair.coarse, pair.fine)
        out = pix2pix_objective(
            lambda x, rng=None: G(x.double(), torch.Generator().manual_seed(21)),
            lambda t: D(t.double()), pair_t, weights)
        return out.loss_g

    check_grads_against_fd(loss_fn, G, seed=3)


def test_cyclegan_objective_generator_gradcheck():
    G = build_generator(toy_unet_spec(dropout=0.0), seed=13).double()
    F = build_generator(toy_unet_spec(dropout=0.0), seed=14).double()
    D_X = build_discriminator(toy_disc_spec(in_channels=1), seed=15).double()
    D_Y = build_discriminator(toy_disc_spec(in_channels=1), seed=16).double()
    gen = torch.Generator().manual_seed(4)
    x = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    y = torch.rand(1, 1, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1

    def loss_fn():
        return cyclegan_objective(G, F, D_X, D_Y, x, y,
                                  LossWeights(lambda_cyc=5.0)).loss_g_total

    check_grads_against_fd(loss_fn, G, seed=5)
    check_grads_against_fd(loss_fn, F, seed=6)


def test_hd_objective_generator_gradcheck():
    G = build_generator(toy_residual_spec(), seed=17).double()
    D = build_discriminator(DiscriminatorSpec(in_channels=4, n_layers=1,
                                              base_width=2, n_scales=2),
                            seed=18).double()
    gen = torch.Generator().manual_seed(7)
    x = (torch.rand(1, 1, 16, 32, generator=gen, dtype=torch.float64) > 0.5).double() * 2 - 1
    real = torch.rand(1, 3, 16, 32, generator=gen, dtype=torch.float64) * 2 - 1

    def loss_fn():
        return hd_objective(G, D, x, real, LossWeights()).loss_g

    check_grads_against_fd(loss_fn, G, seed=8)


def test_objective_losses_finite_and_nonnegative():
    pair = checker_pair(16, 16)
    G = build_generator(toy_unet_spec(), seed=19)
    D = build_discriminator(toy_disc_spec(in_channels=2), seed=20)
    out = pix2pix_objective(G, D, pair, LossWeights(),
                            rng=torch.Generator().manual_seed(0))
    for v in (float(out.loss_g.detach()), float(out.loss_d.detach()), *out.parts.values()):
        assert np.isfinite(v)
        assert v >= 0.0
