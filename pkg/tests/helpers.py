"""Shared toy configurations and gradient-check machinery for the test suite."""
from __future__ import annotations

import numpy as np
import torch

from tissuegen.nets import DiscriminatorSpec, GeneratorSpec

from oracles import fd_gradient_at


def toy_unet_spec(dropout=0.5):
    return GeneratorSpec(kind="unet", in_channels=1, out_channels=1,
                         base_width=2, depth=2, dropout=dropout)


def toy_residual_spec():
    return GeneratorSpec(kind="residual_global", in_channels=1, out_channels=3,
                         base_width=1, depth=1, dropout=0.0)


def toy_disc_spec(in_channels=2, n_scales=1):
    return DiscriminatorSpec(in_channels=in_channels, n_layers=1, base_width=2,
                             n_scales=n_scales)


def n_params(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-10)


def check_grads_against_fd(loss_fn, module, n_points=10, seed=0, tol=1e-4):
    """Compare autograd gradients to central finite differences at random coords.

    L1 terms and ReLUs make the losses piecewise smooth; a coordinate whose FD
    stencil straddles a kink yields an invalid estimate, detected by comparing
    two step sizes, and is resampled. Exactly `n_points` valid points are checked.
    """
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    rng = np.random.default_rng(seed)
    params = list(module.parameters())
    checked = 0
    attempts = 0
    while checked < n_points:
        attempts += 1
        assert attempts < 40 * n_points, "too many kink resamples"
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        fd_a = fd_gradient_at(loss_fn, p, idx, h=1e-6)
        fd_b = fd_gradient_at(loss_fn, p, idx, h=5e-7)
        if abs(fd_a - fd_b) > 1e-6 * max(1.0, abs(fd_a)):
            continue  # kink inside the stencil; FD estimate is meaningless there
        an = p.grad[idx].item()
        # below ~machine_eps/h the FD estimate is roundoff; both sides are zero
        if max(abs(an), abs(fd_a)) >= 1e-8:
            assert rel_err(an, fd_a) <= tol, (an, fd_a)
        checked += 1
