"""Generator and discriminator architectures.

Three families: a U-Net coarse-to-fine mask generator (dropout doubles as the
noise input and stays active at inference), a residual global generator for
mask-to-RGB synthesis, and PatchGAN discriminators (single or two-scale).

Generators use ReLU, reflection padding and tanh outputs; discriminators use
leaky ReLU with slope 0.2. Instance norm everywhere (no affine parameters, so
every learnable weight is a conv weight drawn from N(0, 0.02)).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .masks import BinaryMask

__all__ = [
    "GeneratorSpec",
    "DiscriminatorSpec",
    "build_generator",
    "build_discriminator",
    "multiscale_forward",
    "receptive_field",
    "init_params",
    "param_arrays",
    "load_param_arrays",
    "mask_to_tensor",
    "mask_from_tensor",
    "soft_from_tensor",
    "rgb_to_tensor",
    "rgb_from_tensor",
]

GENERATOR_KINDS = ("unet", "residual_global")
INIT_STD = 0.02
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "unet"
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 16
    depth: int = 4  # unet: downsampling levels; residual_global: residual blocks
    dropout: float = 0.5  # unet decoder dropout; the seedable noise source

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"kind must be one of {GENERATOR_KINDS}, got {self.kind!r}")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorSpec:
    kind: str = "patchgan"
    in_channels: int = 2
    n_layers: int = 3
    base_width: int = 64
    n_scales: int = 1

    def __post_init__(self):
        if self.kind != "patchgan":
            raise ValueError(f"kind must be 'patchgan', got {self.kind!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_scales not in (1, 2):
            raise ValueError(f"n_scales must be 1 or 2, got {self.n_scales}")

    def to_dict(self) -> dict:
        return asdict(self)


def _dropout(x: torch.Tensor, p: float, rng: torch.Generator | None) -> torch.Tensor:
    """Dropout driven by an explicit generator so inference noise is seedable."""
    if p <= 0.0:
        return x
    keep = 1.0 - p
    mask = torch.rand(x.shape, generator=rng, device=x.device, dtype=x.dtype) < keep
    return x * mask / keep


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)


class _UnetLevel(nn.Module):
    """One encoder/decoder level; non-outermost levels concat a skip connection."""

    def __init__(self, input_nc: int, outer_nc: int, inner_nc: int,
                 submodule: "_UnetLevel | None", outermost: bool, innermost: bool,
                 dropout: float):
        super().__init__()
        self.outermost = outermost
        self.innermost = innermost
        self.dropout = 0.0 if outermost else dropout
        self.downpad = nn.ReflectionPad2d(1)
        self.downconv = nn.Conv2d(input_nc, inner_nc, kernel_size=4, stride=2)
        self.downnorm = None if (outermost or innermost) else _norm(inner_nc)
        self.submodule = submodule
        up_in = inner_nc if innermost else inner_nc * 2
        self.upconv = nn.ConvTranspose2d(up_in, outer_nc, kernel_size=4, stride=2,
                                         padding=1)
        self.upnorm = None if outermost else _norm(outer_nc)

    def forward(self, x: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
        d = self.downconv(self.downpad(x if self.outermost else F.relu(x)))
        if self.downnorm is not None:
            d = self.downnorm(d)
        mid = d if self.innermost else self.submodule(d, rng)
        u = self.upconv(F.relu(mid))
        if self.upnorm is not None:
            u = self.upnorm(u)
        u = _dropout(u, self.dropout, rng)
        if self.outermost:
            return torch.tanh(u)
        return torch.cat([x, u], dim=1)


class UnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        widths = [min(spec.base_width * 2 ** i, spec.base_width * 8)
                  for i in range(spec.depth)]
        if spec.depth == 1:
            block = _UnetLevel(spec.in_channels, spec.out_channels, widths[0],
                               None, outermost=True, innermost=True,
                               dropout=spec.dropout)
        else:
            block = _UnetLevel(widths[-2], widths[-2], widths[-1], None,
                               outermost=False, innermost=True, dropout=spec.dropout)
            for i in reversed(range(1, spec.depth - 1)):
                block = _UnetLevel(widths[i - 1], widths[i - 1], widths[i], block,
                                   outermost=False, innermost=False,
                                   dropout=spec.dropout)
            block = _UnetLevel(spec.in_channels, spec.out_channels, widths[0], block,
                               outermost=True, innermost=False, dropout=spec.dropout)
        self.net = block

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        _check_divisible(x, 2 ** self.spec.depth)
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, "
                             f"got {x.shape[1]}")
        return self.net(x, rng)


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), _norm(channels),
            nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), _norm(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGenerator(nn.Module):
    """Global generator: 2 downsampling convs, N residual blocks, 2 upsampling convs."""

    N_DOWN = 2

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, w, 7), _norm(w),
            nn.ReLU(),
        ]
        ch = w
        for _ in range(self.N_DOWN):
            layers += [nn.ReflectionPad2d(1), nn.Conv2d(ch, ch * 2, 3, stride=2),
                       _norm(ch * 2), nn.ReLU()]
            ch *= 2
        layers += [_ResBlock(ch) for _ in range(spec.depth)]
        for _ in range(self.N_DOWN):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1,
                                          output_padding=1),
                       _norm(ch // 2), nn.ReLU()]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, spec.out_channels, 7),
                   nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        _check_divisible(x, 2 ** self.N_DOWN)
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, "
                             f"got {x.shape[1]}")
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN: spatial map of real/fake logits plus intermediate features."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        widths = [min(spec.base_width * 2 ** i, spec.base_width * 8)
                  for i in range(spec.n_layers + 1)]
        blocks = [nn.Sequential(
            nn.Conv2d(spec.in_channels, widths[0], 4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
        )]
        for i in range(1, spec.n_layers):
            blocks.append(nn.Sequential(
                nn.Conv2d(widths[i - 1], widths[i], 4, stride=2, padding=1),
                _norm(widths[i]), nn.LeakyReLU(LEAKY_SLOPE),
            ))
        blocks.append(nn.Sequential(
            nn.Conv2d(widths[spec.n_layers - 1], widths[spec.n_layers], 4,
                      stride=1, padding=1),
            _norm(widths[spec.n_layers]), nn.LeakyReLU(LEAKY_SLOPE),
        ))
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(widths[spec.n_layers], 1, 4, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, "
                             f"got {x.shape[1]}")
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return self.final(h), feats


class MultiscaleDiscriminator(nn.Module):
    """Independent PatchGANs fed with progressively average-pooled inputs."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        single = DiscriminatorSpec(**{**spec.to_dict(), "n_scales": 1})
        self.scales = nn.ModuleList(
            PatchDiscriminator(single) for _ in range(spec.n_scales))

    def forward(self, x: torch.Tensor) -> list[tuple[torch.Tensor, list[torch.Tensor]]]:
        outs = []
        for disc in self.scales:
            outs.append(disc(x))
            x = F.avg_pool2d(x, kernel_size=2, stride=2)
        return outs


def _check_divisible(x: torch.Tensor, factor: int) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        ph = -(-h // factor) * factor
        pw = -(-w // factor) * factor
        raise ValueError(f"input {h}x{w} must be divisible by {factor}; "
                         f"pad to {ph}x{pw}")


def init_params(module: nn.Module, seed: int) -> None:
    """Gaussian(0, 0.02) conv weights, zero biases, in deterministic module order."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(mean=0.0, std=INIT_STD, generator=g)
            if m.bias is not None:
                m.bias.data.zero_()


def build_generator(spec: GeneratorSpec, seed: int) -> nn.Module:
    net = UnetGenerator(spec) if spec.kind == "unet" else ResidualGenerator(spec)
    init_params(net, seed)
    return net


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> nn.Module:
    net = MultiscaleDiscriminator(spec) if spec.n_scales > 1 else PatchDiscriminator(spec)
    init_params(net, seed)
    return net


def multiscale_forward(disc, x: torch.Tensor):
    """Uniform multi-scale view: single-scale discriminators yield a 1-element list."""
    out = disc(x)
    return out if isinstance(out, list) else [out]


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Receptive field of one output score, by the conv-arithmetic recurrence."""
    layers = [(4, 2)] * spec.n_layers + [(4, 1), (4, 1)]
    rf = 1
    for k, s in reversed(layers):
        rf = rf * s + (k - s)
    return rf


def param_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Named parameter arrays (layer-path keys), detached to numpy."""
    return {name: p.detach().cpu().numpy().copy()
            for name, p in module.state_dict().items()}


def load_param_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.asarray(a)) for name, a in arrays.items()}
    module.load_state_dict(state)


# ------------------------------------------------------------ tensor adapters

def mask_to_tensor(mask: BinaryMask, dtype=torch.float32) -> torch.Tensor:
    """(1, 1, H, W) tensor in {-1, +1}."""
    arr = mask.plane.astype(np.float32) * 2.0 - 1.0
    return torch.from_numpy(arr).to(dtype)[None, None]


def soft_from_tensor(t: torch.Tensor) -> np.ndarray:
    """Squeeze a (1, 1, H, W) tanh output to an (H, W) float array in [0, 1]."""
    arr = t.detach().cpu().numpy().squeeze(0).squeeze(0)
    return ((arr + 1.0) / 2.0).astype(np.float32)


def mask_from_tensor(t: torch.Tensor, threshold: float = 0.5) -> BinaryMask:
    """Binarize a tanh output; threshold is in [0, 1] soft units."""
    return BinaryMask((soft_from_tensor(t) > threshold).astype(np.uint8))


def rgb_to_tensor(rgb: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(1, 3, H, W) tensor in [-1, 1] from an HxWx3 uint8 array."""
    arr = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1)).to(dtype)[None]


def rgb_from_tensor(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy().squeeze(0).transpose(1, 2, 0)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
