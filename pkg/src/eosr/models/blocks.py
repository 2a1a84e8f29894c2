"""Residual block families used in the generator body."""

from __future__ import annotations

import torch
from torch import nn


class ResidualBlock(nn.Module):
    """SRResNet block without batch norm: ``x + s * conv(prelu(conv(x)))``."""

    def __init__(self, channels: int, residual_scale: float = 0.2, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.act = nn.PReLU(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.residual_scale = residual_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x))) * self.residual_scale


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.fc(self.pool(x))


class RCAB(nn.Module):
    """Residual channel attention block."""

    def __init__(self, channels: int, residual_scale: float = 0.2, reduction: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            ChannelAttention(channels, reduction),
        )
        self.residual_scale = residual_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x) * self.residual_scale


class ResidualDenseBlock(nn.Module):
    """Five densely connected convs; the last one fuses back to ``channels``."""

    def __init__(self, channels: int, growth_channels: int = 32, residual_scale: float = 0.2):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + i * growth_channels, growth_channels, 3, padding=1) for i in range(4)
        )
        self.fuse = nn.Conv2d(channels + 4 * growth_channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self.residual_scale = residual_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1)) * self.residual_scale


class RRDB(nn.Module):
    """Residual-in-residual dense block (three RDBs inside an outer skip)."""

    def __init__(self, channels: int, growth_channels: int = 32, residual_scale: float = 0.2):
        super().__init__()
        self.rdbs = nn.Sequential(
            *(ResidualDenseBlock(channels, growth_channels, residual_scale) for _ in range(3))
        )
        self.residual_scale = residual_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.rdbs(x) * self.residual_scale


class LargeKernelAttention(nn.Module):
    # 21x21 effective receptive field from 5x5 dw + 7x7 dw (dilation 3) + 1x1
    def __init__(self, channels: int):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
        self.dw_dilated = nn.Conv2d(channels, channels, 7, padding=9, dilation=3, groups=channels)
        self.pw = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.pw(self.dw_dilated(self.dw(x)))


class LKABlock(nn.Module):
    def __init__(self, channels: int, residual_scale: float = 0.2):
        super().__init__()
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.act = nn.GELU()
        self.attn = LargeKernelAttention(channels)
        self.proj_out = nn.Conv2d(channels, channels, 1)
        self.residual_scale = residual_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.proj_out(self.attn(self.act(self.proj_in(x)))) * self.residual_scale


class NoiseResBlock(nn.Module):
    """Residual block whose first conv output is modulated by a latent code.

    An MLP maps ``z`` to per-channel ``(gamma, beta)``; the block computes
    ``x_mod = (1 + gamma) * conv1(x) + beta`` and returns
    ``x + conv2(prelu(x_mod)) * s``.
    """

    def __init__(self, channels: int, noise_dim: int, residual_scale: float = 0.2, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.channels = channels
        self.noise_dim = noise_dim
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.act = nn.PReLU(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.mlp = nn.Sequential(
            nn.Linear(noise_dim, noise_dim),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(noise_dim, 2 * channels),
        )
        # near-identity start: small but nonzero so latents already matter at init
        nn.init.normal_(self.mlp[-1].weight, std=1e-2)
        nn.init.zeros_(self.mlp[-1].bias)
        self.residual_scale = residual_scale

    def modulation(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gamma, beta = self.mlp(z).chunk(2, dim=1)
        return gamma[:, :, None, None], beta[:, :, None, None]

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} feature channels, got {x.shape[1]}")
        if z.ndim != 2 or z.shape[1] != self.noise_dim or z.shape[0] != x.shape[0]:
            raise ValueError(f"latent must have shape ({x.shape[0]}, {self.noise_dim}), got {tuple(z.shape)}")
        gamma, beta = self.modulation(z)
        x_mod = (1 + gamma) * self.conv1(x) + beta
        return x + self.conv2(self.act(x_mod)) * self.residual_scale


def noise_res_block_forward(block: NoiseResBlock, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return block(x, z)
