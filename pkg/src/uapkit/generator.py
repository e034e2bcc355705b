"""Encoder-bottleneck-dual-decoder network producing raw noise and flow fields.

A single fixed random pattern (the "seed pattern") is pushed through the net;
one decoder head emits a raw additive noise map via tanh, the other a raw flow
field via sigmoid. Both raw outputs are normalized to their budgets elsewhere
(see perturb.scale_noise and flowwarp.scale_flow). The net is trained with
batch size 1, hence instance normalization throughout.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import TrainingDiverged


@dataclass(frozen=True)
class GeneratorArch:
    """Shape and capacity settings for PerturbationGenerator.

    Height and width must be multiples of 4 (two stride-2 stages) and at
    least 8 so the bottleneck keeps a spatial extent instance norm can
    meaningfully normalize over.
    """

    in_channels: int = 3
    height: int = 32
    width: int = 32
    base_width: int = 64
    num_resnet_blocks: int = 2
    # The raw flow head is a sigmoid; by default its output is remapped from
    # (0, 1) to (-1, 1) so displacements can point both ways before budget
    # scaling. Set False to keep the verbatim nonnegative sigmoid output.
    signed_flow: bool = True

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.height % 4 or self.width % 4 or self.height < 8 or self.width < 8:
            raise ValueError(
                f"height and width must be multiples of 4 and >= 8, got {self.height}x{self.width}"
            )
        if self.base_width < 8:
            raise ValueError(f"base_width must be >= 8, got {self.base_width}")
        if self.num_resnet_blocks < 1:
            raise ValueError(f"num_resnet_blocks must be >= 1, got {self.num_resnet_blocks}")


@dataclass(frozen=True)
class SeedPattern:
    """Fixed standard-normal input pattern plus the seed that produced it."""

    data: Tensor  # (c, h, w) float32
    seed: int

    def digest(self) -> bytes:
        """SHA-256 over the little-endian float32 bytes of the pattern."""
        arr = self.data.detach().cpu().contiguous().numpy().astype("<f4")
        return hashlib.sha256(arr.tobytes()).digest()


def make_seed_pattern(arch: GeneratorArch, seed: int) -> SeedPattern:
    gen = torch.Generator().manual_seed(seed)
    data = torch.randn(arch.in_channels, arch.height, arch.width, generator=gen)
    return SeedPattern(data=data, seed=seed)


class _ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


def _decoder(width: int, out_channels: int) -> nn.Sequential:
    # Mirrors the encoder: two stride-2 upsampling stages, one stride-1 stage,
    # then a plain conv head (activation applied by the caller).
    return nn.Sequential(
        nn.ConvTranspose2d(4 * width, 2 * width, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(2 * width, affine=True),
        nn.ReLU(inplace=True),
        nn.ConvTranspose2d(2 * width, width, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(width, affine=True),
        nn.ReLU(inplace=True),
        nn.ConvTranspose2d(width, width, 3, stride=1, padding=1),
        nn.InstanceNorm2d(width, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv2d(width, out_channels, 3, padding=1),
    )


class PerturbationGenerator(nn.Module):
    """Maps a (c, h, w) random pattern to raw (noise, flow) perturbation fields."""

    def __init__(self, arch: GeneratorArch):
        super().__init__()
        self.arch = arch
        w = arch.base_width
        self.encoder = nn.Sequential(
            nn.Conv2d(arch.in_channels, w, 3, stride=1, padding=1),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w, affine=True),
            nn.ReLU(inplace=True),
        )
        self.bottleneck = nn.Sequential(
            *[_ResidualBlock(4 * w) for _ in range(arch.num_resnet_blocks)]
        )
        self.noise_decoder = _decoder(w, arch.in_channels)
        self.flow_decoder = _decoder(w, 2)

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (raw_noise, raw_flow) for one pattern.

        raw_noise is (c, h, w) in (-1, 1); raw_flow is (2, h, w), in (-1, 1)
        when the arch uses signed flow output, else in (0, 1).
        """
        a = self.arch
        if z.ndim != 3 or z.shape != (a.in_channels, a.height, a.width):
            raise ValueError(
                f"pattern must have shape ({a.in_channels}, {a.height}, {a.width}), "
                f"got {tuple(z.shape)}"
            )
        feat = self.bottleneck(self.encoder(z.unsqueeze(0)))
        raw_noise = torch.tanh(self.noise_decoder(feat))
        raw_flow = torch.sigmoid(self.flow_decoder(feat))
        if a.signed_flow:
            raw_flow = 2.0 * raw_flow - 1.0
        if not (torch.isfinite(raw_noise).all() and torch.isfinite(raw_flow).all()):
            raise TrainingDiverged("generator produced non-finite outputs")
        return raw_noise[0], raw_flow[0]


def init_generator(arch: GeneratorArch, seed: int) -> PerturbationGenerator:
    """Construct a generator with weights drawn deterministically from ``seed``."""
    torch.manual_seed(seed)
    return PerturbationGenerator(arch)
