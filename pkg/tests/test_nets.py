import numpy as np
import pytest
import torch

from tissuegen.masks import BinaryMask
from tissuegen.nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    mask_from_tensor,
    mask_to_tensor,
    multiscale_forward,
    param_arrays,
    receptive_field,
    rgb_from_tensor,
    rgb_to_tensor,
    soft_from_tensor,
)

from helpers import n_params, rel_err, toy_disc_spec, toy_residual_spec, toy_unet_spec
from oracles import fd_gradient_at


def default_unet():
    return GeneratorSpec(kind="unet", in_channels=1, out_channels=1,
                         base_width=16, depth=4)


# ---------------------------------------------------------------- generators

def test_unet_shape_and_range():
    g = build_generator(default_unet(), seed=0)
    x = torch.rand(1, 1, 64, 128) * 2 - 1
    y = g(x, rng=torch.Generator().manual_seed(0))
    assert y.shape == (1, 1, 64, 128)
    assert y.min() >= -1.0 and y.max() <= 1.0


def test_unet_range_for_extreme_inputs():
    g = build_generator(toy_unet_spec(), seed=1)
    x = torch.full((1, 1, 16, 16), 1e6)
    y = g(x, rng=torch.Generator().manual_seed(0))
    assert torch.isfinite(y).all()
    assert y.abs().max() <= 1.0


def test_unet_rejects_indivisible_dims_with_hint():
    g = build_generator(default_unet(), seed=0)
    with pytest.raises(ValueError, match="pad to 64x144"):
        g(torch.zeros(1, 1, 60, 130))


def test_generator_rejects_channel_mismatch():
    g = build_generator(default_unet(), seed=0)
    with pytest.raises(ValueError, match="input channels"):
        g(torch.zeros(1, 3, 64, 128))


def test_init_statistics():
    g = build_generator(GeneratorSpec(kind="unet", base_width=24, depth=4), seed=7)
    weights = np.concatenate([
        p.detach().numpy().ravel()
        for name, p in g.named_parameters() if name.endswith("weight")
    ])
    assert weights.size >= 1e5
    assert abs(weights.mean()) <= 0.002
    assert abs(weights.std() - 0.02) <= 0.002


def test_fixed_seed_gives_bit_identical_params():
    a = param_arrays(build_generator(default_unet(), seed=3))
    b = param_arrays(build_generator(default_unet(), seed=3))
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = param_arrays(build_generator(default_unet(), seed=4))
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_dropout_is_seeded_and_active_at_inference():
    g = build_generator(default_unet(), seed=0)
    x = torch.rand(1, 1, 64, 128)
    y1 = g(x, rng=torch.Generator().manual_seed(5))
    y2 = g(x, rng=torch.Generator().manual_seed(5))
    y3 = g(x, rng=torch.Generator().manual_seed(6))
    assert torch.equal(y1, y2)
    assert not torch.equal(y1, y3)


def test_residual_generator_shape_and_determinism():
    g = build_generator(toy_residual_spec(), seed=2)
    x = torch.rand(1, 1, 32, 64)
    y1 = g(x, rng=torch.Generator().manual_seed(0))
    y2 = g(x, rng=torch.Generator().manual_seed(99))
    assert y1.shape == (1, 3, 32, 64)
    assert torch.equal(y1, y2)  # no dropout: rng has no effect


# ---------------------------------------------------------------- discriminators

def test_receptive_field_default_is_70():
    # conv-arithmetic recurrence over [(4,2),(4,2),(4,2),(4,1),(4,1)], computed
    # independently: 1 -> 4 -> 7 -> 16 -> 34 -> 70
    assert receptive_field(DiscriminatorSpec(n_layers=3)) == 70


def test_score_map_is_patch_level():
    d = build_discriminator(DiscriminatorSpec(in_channels=2, n_layers=3,
                                              base_width=8), seed=0)
    score, feats = d(torch.rand(1, 2, 64, 128))
    assert score.shape == (1, 1, 6, 14)  # 64/8 - 2 and 128/8 - 2 from conv arithmetic
    assert score.numel() > 1
    assert len(feats) == 3 + 1


def test_feature_list_length_matches_layers():
    for n_layers in (1, 2, 4):
        d = build_discriminator(DiscriminatorSpec(in_channels=1, n_layers=n_layers,
                                                  base_width=4), seed=0)
        _, feats = d(torch.rand(1, 1, 64, 64))
        assert len(feats) == n_layers + 1


def test_discriminator_rejects_channel_mismatch():
    d = build_discriminator(toy_disc_spec(in_channels=2), seed=0)
    with pytest.raises(ValueError, match="input channels"):
        d(torch.rand(1, 3, 16, 16))


def test_multiscale_downsamples_by_two():
    spec = DiscriminatorSpec(in_channels=1, n_layers=3, base_width=8, n_scales=2)
    d = build_discriminator(spec, seed=0)
    outs = multiscale_forward(d, torch.rand(1, 1, 64, 128))
    assert len(outs) == 2
    s0, _ = outs[0]
    s1, _ = outs[1]
    assert s0.shape == (1, 1, 6, 14)   # full-resolution 64x128 branch
    assert s1.shape == (1, 1, 2, 6)    # pooled 32x64 branch
    assert outs[1][1][0].shape[-2:] == (16, 32)


def test_single_scale_reduces_to_plain_forward():
    d = build_discriminator(toy_disc_spec(), seed=0)
    x = torch.rand(1, 2, 16, 16)
    outs = multiscale_forward(d, x)
    score, feats = d(x)
    assert len(outs) == 1
    assert torch.equal(outs[0][0], score)


# ---------------------------------------------------------------- gradients

def test_gradient_flow_no_dead_branches():
    g = build_generator(toy_unet_spec(), seed=0)
    d = build_discriminator(toy_disc_spec(in_channels=1), seed=1)
    for _ in range(3):
        x = torch.rand(1, 1, 16, 16) * 2 - 1
        out = g(x, rng=torch.Generator().manual_seed(0))
        score, feats = d(out)
        loss = score.mean() + sum(f.abs().mean() for f in feats) + out.abs().mean()
        loss.backward()
    for name, p in list(g.named_parameters()) + list(d.named_parameters()):
        assert p.grad is not None, name
        assert p.grad.abs().max() > 0, name


def test_generator_gradients_match_finite_differences():
    torch.manual_seed(0)
    g = build_generator(toy_unet_spec(), seed=0).double()
    assert n_params(g) <= 1000
    x = (torch.rand(1, 1, 16, 16, dtype=torch.float64) * 2 - 1)
    target = torch.rand(1, 1, 16, 16, dtype=torch.float64) * 2 - 1

    def loss_fn():
        out = g(x, rng=torch.Generator().manual_seed(3))
        return (out - target).abs().mean()

    loss = loss_fn()
    g.zero_grad()
    loss.backward()
    rng = np.random.default_rng(0)
    params = list(g.parameters())
    for _ in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        fd = fd_gradient_at(loss_fn, p, idx)
        an = p.grad[idx].item()
        assert rel_err(an, fd) <= 1e-4, (an, fd)


def test_discriminator_gradients_match_finite_differences():
    torch.manual_seed(0)
    d = build_discriminator(toy_disc_spec(in_channels=1), seed=5).double()
    assert n_params(d) <= 1000
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)

    def loss_fn():
        score, feats = d(x)
        return torch.sigmoid(score).mean() + feats[0].abs().mean()

    loss = loss_fn()
    d.zero_grad()
    loss.backward()
    rng = np.random.default_rng(1)
    params = list(d.parameters())
    for _ in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        fd = fd_gradient_at(loss_fn, p, idx)
        an = p.grad[idx].item()
        assert rel_err(an, fd) <= 1e-4, (an, fd)


# ---------------------------------------------------------------- adapters

def test_mask_tensor_round_trip():
    rng = np.random.default_rng(0)
    mask = BinaryMask((rng.random((16, 24)) < 0.5).astype(np.uint8))
    t = mask_to_tensor(mask)
    assert t.shape == (1, 1, 16, 24)
    assert set(np.unique(t.numpy())) <= {-1.0, 1.0}
    assert mask_from_tensor(t) == mask
    soft = soft_from_tensor(t)
    assert soft.min() >= 0.0 and soft.max() <= 1.0


def test_rgb_tensor_round_trip():
    rng = np.random.default_rng(1)
    rgb = rng.integers(0, 256, size=(8, 12, 3)).astype(np.uint8)
    t = rgb_to_tensor(rgb)
    assert t.shape == (1, 3, 8, 12)
    assert np.array_equal(rgb_from_tensor(t), rgb)
