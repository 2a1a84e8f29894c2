"""Generator zoo.

Every backbone shares one skeleton::

    x_head = head(x - offset)
    y      = output_head(upsampler(tail(body(x_head) + x_head))) + offset

and differs only in the residual block family used in ``body``. The
``esrgan`` type swaps in the ESRGAN-style head/upsampler/output convs.
``offset`` is a fixed constant (``Model.data_offset``, default 0.5, the
middle of the normalized range) so the network starts out working on
roughly centred data. Convolutions pad by edge replication.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from ..config import ModelConfig
from .blocks import RCAB, RRDB, LKABlock, NoiseResBlock, ResidualBlock

HEAD_KERNEL = 9


def _make_block(cfg: ModelConfig) -> nn.Module:
    c, s = cfg.n_channels, cfg.residual_scale
    if cfg.model_type == "res":
        return ResidualBlock(c, s)
    if cfg.model_type == "rcab":
        return RCAB(c, s)
    if cfg.model_type in ("rrdb", "esrgan"):
        return RRDB(c, cfg.growth_channels, s)
    if cfg.model_type == "lka":
        return LKABlock(c, s)
    if cfg.model_type == "cgan":
        return NoiseResBlock(c, cfg.noise_dim, s)
    raise AssertionError(f"unsupported model_type {cfg.model_type!r}")


class PixelShuffleUpsampler(nn.Sequential):
    def __init__(self, channels: int, scale: int):
        layers: list[nn.Module] = []
        for _ in range(int(math.log2(scale))):
            layers += [nn.Conv2d(channels, channels * 4, 3, padding=1), nn.PixelShuffle(2), nn.PReLU(channels)]
        super().__init__(*layers)


class _NearestConv(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")))


class NearestUpsampler(nn.Sequential):
    """ESRGAN upsampling: nearest-neighbour x2 followed by conv, repeated."""

    def __init__(self, channels: int, scale: int):
        super().__init__(*(_NearestConv(channels) for _ in range(int(math.log2(scale)))))


class Body(nn.Module):
    """Block sequence; forwards the latent to noise-conditioned blocks."""

    def __init__(self, blocks: list[nn.Module]):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor, z: Optional[torch.Tensor] = None) -> torch.Tensor:
        for block in self.blocks:
            x = block(x, z) if isinstance(block, NoiseResBlock) else block(x)
        return x


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.model_type = cfg.model_type
        self.in_bands = cfg.in_bands
        self.out_bands = cfg.out_bands
        self.scale = cfg.scale
        self.noise_dim = cfg.noise_dim if cfg.model_type == "cgan" else None
        c = cfg.n_channels

        if cfg.model_type == "esrgan":
            self.head = nn.Conv2d(cfg.in_bands, c, 3, padding=1)
            self.upsampler = NearestUpsampler(c, cfg.scale)
            self.output_head = nn.Sequential(
                nn.Conv2d(c, c, 3, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.Conv2d(c, cfg.out_bands, 3, padding=1),
            )
        else:
            self.head = nn.Sequential(
                nn.Conv2d(cfg.in_bands, c, HEAD_KERNEL, padding=HEAD_KERNEL // 2),
                nn.PReLU(c),
            )
            self.upsampler = PixelShuffleUpsampler(c, cfg.scale)
            self.output_head = nn.Conv2d(c, cfg.out_bands, 3, padding=1)
        self.body = Body([_make_block(cfg) for _ in range(cfg.n_blocks)])
        self.tail = nn.Conv2d(c, c, 3, padding=1)
        self.data_offset = float(cfg.data_offset)
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and any(m.padding):
                m.padding_mode = "replicate"

    @property
    def is_conditional(self) -> bool:
        return self.noise_dim is not None

    def sample_noise(self, batch_size: int, seed: Optional[int] = None) -> torch.Tensor:
        """Draw a ``(batch_size, noise_dim)`` standard-normal latent."""
        if not self.is_conditional:
            raise ValueError(f"sample_noise is only available for cgan generators, not {self.model_type!r}")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        device = next(self.parameters()).device
        gen = None
        if seed is not None:
            gen = torch.Generator(device="cpu").manual_seed(seed)
        z = torch.randn(batch_size, self.noise_dim, generator=gen)
        return z.to(device)

    def forward(
        self,
        x: torch.Tensor,
        z: Optional[torch.Tensor] = None,
        return_noise: bool = False,
    ):
        if x.ndim != 4 or x.shape[1] != self.in_bands:
            raise ValueError(f"expected input of shape (B, {self.in_bands}, H, W), got {tuple(x.shape)}")
        if self.is_conditional:
            if z is None:
                z = self.sample_noise(x.shape[0]).to(dtype=x.dtype)
            elif z.ndim != 2 or z.shape[1] != self.noise_dim:
                raise ValueError(f"latent length must be {self.noise_dim}, got shape {tuple(z.shape)}")
            elif z.shape[0] != x.shape[0]:
                if z.shape[0] != 1:
                    raise ValueError(f"latent batch {z.shape[0]} does not match input batch {x.shape[0]}")
                z = z.expand(x.shape[0], -1)
            z = z.to(device=x.device, dtype=x.dtype)
        elif z is not None:
            raise ValueError(f"model_type {self.model_type!r} does not take a latent code")

        x_head = self.head(x - self.data_offset)
        feats = self.tail(self.body(x_head, z) + x_head)
        out = self.output_head(self.upsampler(feats)) + self.data_offset
        if return_noise:
            return out, z
        return out


def build_generator(cfg: ModelConfig, seed: Optional[int] = None) -> Generator:
    """Construct the generator for ``cfg``; ``seed`` makes initialization reproducible."""
    if cfg.model_type not in ("res", "rcab", "rrdb", "lka", "esrgan", "cgan"):
        raise AssertionError(f"unsupported model_type {cfg.model_type!r}")
    ctx = torch.random.fork_rng(devices=[]) if seed is not None else contextlib.nullcontext()
    with ctx:
        if seed is not None:
            torch.manual_seed(seed)
        return Generator(cfg)


def generator_forward(net: Generator, x: torch.Tensor, z: Optional[torch.Tensor] = None, return_noise: bool = False):
    return net(x, z=z, return_noise=return_noise)


def sample_noise(net: Generator, batch_size: int, seed: Optional[int] = None) -> torch.Tensor:
    return net.sample_noise(batch_size, seed)
