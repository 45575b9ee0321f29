"""Training objectives for the three model families.

The adversarial min-max terms are realized as binary cross entropy on
pre-sigmoid PatchGAN score maps (the numerically stable form with the same
optimum). All reductions are arithmetic means over batch and spatial
positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .masks import BinaryMask
from .nets import mask_to_tensor, multiscale_forward

__all__ = [
    "LossWeights",
    "Pix2PixLoss",
    "CycleLoss",
    "HDLoss",
    "cgan_loss",
    "l1_loss",
    "pix2pix_objective",
    "cyclegan_objective",
    "hd_objective",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 100.0   # pix2pix L1 regularization weight
    lambda_cyc: float = 10.0   # cycle-consistency weight
    hd_weights: dict = field(default_factory=lambda: {"mse": 1.0, "bce": 1.0,
                                                      "feat_match": 1.0})

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.lambda_cyc < 0:
            raise ValueError("loss weights must be >= 0")
        if any(v < 0 for v in self.hd_weights.values()):
            raise ValueError("hd_weights must be >= 0")


@dataclass
class Pix2PixLoss:
    loss_g: torch.Tensor
    loss_d: torch.Tensor
    parts: dict


@dataclass
class CycleLoss:
    loss_g_total: torch.Tensor
    loss_dx: torch.Tensor
    loss_dy: torch.Tensor
    parts: dict


@dataclass
class HDLoss:
    loss_g: torch.Tensor
    loss_d: torch.Tensor
    parts: dict


def _bce(logits: torch.Tensor, target_value: float) -> torch.Tensor:
    target = torch.full_like(logits, target_value)
    return F.binary_cross_entropy_with_logits(logits, target)


def cgan_loss(d_real_scores: torch.Tensor, d_fake_scores: torch.Tensor,
              ) -> tuple[torch.Tensor, torch.Tensor]:
    """(loss_d, loss_g) from pre-sigmoid score maps of matching shapes."""
    if d_real_scores.shape != d_fake_scores.shape:
        raise ValueError(f"score map shapes differ: {tuple(d_real_scores.shape)} "
                         f"vs {tuple(d_fake_scores.shape)}")
    loss_d = 0.5 * (_bce(d_real_scores, 1.0) + _bce(d_fake_scores, 0.0))
    loss_g = _bce(d_fake_scores, 1.0)
    return loss_d, loss_g


def l1_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    if y.shape != y_hat.shape:
        raise ValueError(f"array shapes differ: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    return (y - y_hat).abs().mean()


def _as_tensor(value, dtype=torch.float32) -> torch.Tensor:
    if isinstance(value, BinaryMask):
        return mask_to_tensor(value, dtype=dtype)
    return value


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def _score(d_out) -> torch.Tensor:
    # discriminators return (score_map, features); stubs may return a bare map
    return d_out[0] if isinstance(d_out, tuple) else d_out


def pix2pix_objective(G, D, pair, weights: LossWeights,
                      rng: torch.Generator | None = None) -> Pix2PixLoss:
    """Conditional GAN term plus weighted L1 between target and generated mask.

    The discriminator scores the (coarse, fine) channel concatenation. The
    discriminator loss sees the generated mask detached, so it carries no
    generator gradient.
    """
    x = _as_tensor(pair.coarse)
    y = _as_tensor(pair.fine)
    fake = G(x, rng)
    d_real = _score(D(torch.cat([x, y], dim=1)))
    d_fake_det = _score(D(torch.cat([x, fake.detach()], dim=1)))
    d_fake = _score(D(torch.cat([x, fake], dim=1)))
    loss_d, _ = cgan_loss(d_real, d_fake_det)
    loss_g_adv = _bce(d_fake, 1.0)
    loss_l1 = l1_loss(y, fake)
    loss_g = loss_g_adv + weights.lambda_l1 * loss_l1
    parts = {"loss_g_adv": _f(loss_g_adv), "loss_g_l1": _f(loss_l1),
             "loss_d": _f(loss_d)}
    return Pix2PixLoss(loss_g, loss_d, parts)


def cyclegan_objective(G, Fgen, D_X, D_Y, x, y, weights: LossWeights,
                       rng: torch.Generator | None = None) -> CycleLoss:
    """Two adversarial terms plus the weighted two-way cycle reconstruction term."""
    x = _as_tensor(x)
    y = _as_tensor(y)
    fake_y = G(x, rng)
    fake_x = Fgen(y, rng)
    rec_x = Fgen(fake_y, rng)
    rec_y = G(fake_x, rng)
    loss_g_adv = _bce(_score(D_Y(fake_y)), 1.0) + _bce(_score(D_X(fake_x)), 1.0)
    loss_cyc = l1_loss(rec_x, x) + l1_loss(rec_y, y)
    loss_g_total = loss_g_adv + weights.lambda_cyc * loss_cyc
    loss_dx, _ = cgan_loss(_score(D_X(x)), _score(D_X(fake_x.detach())))
    loss_dy, _ = cgan_loss(_score(D_Y(y)), _score(D_Y(fake_y.detach())))
    parts = {"loss_g_adv": _f(loss_g_adv), "loss_g_cyc": _f(loss_cyc),
             "loss_dx": _f(loss_dx), "loss_dy": _f(loss_dy),
             "loss_d": _f(loss_dx + loss_dy)}
    return CycleLoss(loss_g_total, loss_dx, loss_dy, parts)


def hd_objective(G, multiscale_D, mask, rgb_real, weights: LossWeights,
                 rng: torch.Generator | None = None) -> HDLoss:
    """RGB-stage objective over two discriminator scales.

    Per scale: BCE adversarial term, scalar MSE between the mean sigmoid
    predictions for fake and (detached) real, and a feature-matching mean-L1
    over the discriminator's intermediate features.
    """
    n_scales = getattr(getattr(multiscale_D, "spec", None), "n_scales", None)
    if n_scales != 2:
        raise ValueError(f"hd_objective requires a 2-scale discriminator, "
                         f"got n_scales={n_scales}")
    x = _as_tensor(mask)
    real = _as_tensor(rgb_real)
    fake = G(x, rng)
    outs_real = multiscale_forward(multiscale_D, torch.cat([x, real], dim=1))
    outs_fake = multiscale_forward(multiscale_D, torch.cat([x, fake], dim=1))
    outs_fake_det = multiscale_forward(multiscale_D, torch.cat([x, fake.detach()], dim=1))

    w = weights.hd_weights
    zero = torch.zeros((), dtype=x.dtype)
    loss_d = zero.clone()
    adv = zero.clone()
    mse = zero.clone()
    fm = zero.clone()
    for (s_real, f_real), (s_fake, f_fake), (s_fake_det, _) in zip(
            outs_real, outs_fake, outs_fake_det):
        loss_d = loss_d + 0.5 * (_bce(s_real, 1.0) + _bce(s_fake_det, 0.0))
        adv = adv + _bce(s_fake, 1.0)
        mse = mse + (torch.sigmoid(s_fake).mean()
                     - torch.sigmoid(s_real).mean().detach()) ** 2
        scale_fm = zero.clone()
        for fr, ff in zip(f_real, f_fake):
            scale_fm = scale_fm + l1_loss(fr.detach(), ff)
        fm = fm + scale_fm / len(f_real)
    loss_g = w["bce"] * adv + w["mse"] * mse + w["feat_match"] * fm
    parts = {"loss_g_adv": _f(adv), "loss_g_mse": _f(mse),
             "loss_g_fm": _f(fm), "loss_d": _f(loss_d)}
    return HDLoss(loss_g, loss_d, parts)
