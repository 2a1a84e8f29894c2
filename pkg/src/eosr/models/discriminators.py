"""Discriminator zoo: global SRGAN critic, PatchGAN, and ESRGAN VGG-style critic.

All critics return raw logits; the adversarial losses apply the sigmoid.
"""

from __future__ import annotations

import contextlib
from typing import Optional

import torch
from torch import nn

from ..config import DiscriminatorConfig

LEAKY_SLOPE = 0.2


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


def conv_block(in_ch: int, out_ch: int, kernel: int, stride: int, norm: str = "instance") -> nn.Sequential:
    """Conv -> optional norm -> LeakyReLU, the shared critic building block."""
    padding = 1
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=norm != "batch"),
        _norm(norm, out_ch),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
    )


def _conv_out(n: int, kernel: int, stride: int, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class _Critic(nn.Module):
    in_bands: int
    # (kernel, stride, normalized) per conv layer, used for size checks
    _layout: list[tuple[int, int, bool]]

    def spatial_sizes(self, n: int) -> list[int]:
        sizes = []
        for kernel, stride, _ in self._layout:
            n = _conv_out(n, kernel, stride)
            sizes.append(n)
        return sizes

    def accepts(self, n: int) -> bool:
        sizes = self.spatial_sizes(n)
        if sizes[-1] < 1:
            return False
        # instance norm needs more than one spatial element per channel
        return all(s * s > 1 for s, (_, _, normed) in zip(sizes, self._layout) if normed)

    @property
    def min_input_size(self) -> int:
        n = 1
        while not self.accepts(n):
            n += 1
        return n

    def _check_input(self, img: torch.Tensor) -> None:
        if img.ndim != 4 or img.shape[1] != self.in_bands:
            raise ValueError(f"expected input of shape (B, {self.in_bands}, H, W), got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if not (self.accepts(h) and self.accepts(w)):
            raise ValueError(
                f"input {h}x{w} is smaller than the minimum {self.min_input_size}x{self.min_input_size} "
                f"for this {self.disc_type} critic"
            )


class StandardDiscriminator(_Critic):
    """SRGAN critic: 8 conv blocks (64 -> 512 channels), adaptive pool 6x6, two FC layers."""

    disc_type = "standard"

    def __init__(self, in_bands: int, base_channels: int = 64, linear_size: int = 1024):
        super().__init__()
        self.in_bands = in_bands
        b = base_channels
        plan = [(b, 1), (b, 2), (2 * b, 1), (2 * b, 2), (4 * b, 1), (4 * b, 2), (8 * b, 1), (8 * b, 2)]
        layers, prev = [], in_bands
        self._layout = []
        for i, (ch, stride) in enumerate(plan):
            norm = "none" if i == 0 else "instance"
            layers.append(conv_block(prev, ch, 3, stride, norm))
            self._layout.append((3, stride, norm != "none"))
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(6)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(prev * 36, linear_size),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Linear(linear_size, 1),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        self._check_input(img)
        return self.head(self.pool(self.features(img)))


class ESRGANDiscriminator(_Critic):
    """VGG-style critic with five stride-2 stages, pooled to 4x4 before the FC head."""

    disc_type = "esrgan"

    def __init__(self, in_bands: int, base_channels: int = 64, linear_size: int = 1024):
        super().__init__()
        self.in_bands = in_bands
        b = base_channels
        widths = [b, 2 * b, 4 * b, 8 * b, 8 * b]
        layers: list[nn.Module] = []
        self._layout = []
        prev = in_bands
        for i, ch in enumerate(widths):
            # 3x3 stride 1 then 4x4 stride 2
            first_norm = "none" if i == 0 else "instance"
            layers.append(conv_block(prev, ch, 3, 1, first_norm))
            layers.append(conv_block(ch, ch, 4, 2, "instance"))
            self._layout += [(3, 1, first_norm != "none"), (4, 2, True)]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(prev * 16, linear_size),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Linear(linear_size, 1),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        self._check_input(img)
        return self.head(self.pool(self.features(img)))


class PatchGANDiscriminator(_Critic):
    """PatchGAN critic emitting a ``(B, 1, h', w')`` logit grid.

    ``n_blocks`` counts the LeakyReLU conv blocks: the first ``n_blocks - 1``
    use stride 2, the last stride 1, followed by a 1-channel 4x4 output conv.
    ``n_blocks=4`` gives the classic 70x70 receptive field.
    """

    disc_type = "patchgan"

    def __init__(self, in_bands: int, base_channels: int = 64, n_blocks: int = 4, norm: str = "instance"):
        super().__init__()
        self.in_bands = in_bands
        self.n_blocks = n_blocks
        layers: list[nn.Module] = []
        self._layout = []
        prev = in_bands
        for i in range(n_blocks):
            ch = base_channels * min(2**i, 8)
            stride = 2 if i < n_blocks - 1 else 1
            block_norm = "none" if i == 0 else norm
            layers.append(conv_block(prev, ch, 4, stride, block_norm))
            self._layout.append((4, stride, block_norm == "instance"))
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self._layout.append((4, 1, False))
        self.model = nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        self._check_input(img)
        return self.model(img)


def patch_grid_size(n: int, n_blocks: int) -> int:
    """Output grid length of a PatchGAN critic for input length ``n``."""
    for _ in range(n_blocks - 1):
        n = (n - 2) // 2 + 1
    # stride-1 block and output conv each shrink by one (4x4 kernel, pad 1)
    return n - 2


def patch_receptive_field(n_blocks: int) -> int:
    """Input pixels seen by one PatchGAN output cell."""
    rf = 4  # output conv
    rf += 3  # stride-1 block
    for _ in range(n_blocks - 1):
        rf = 2 * rf + 2
    return rf


def patch_stride(n_blocks: int) -> int:
    return 2 ** (n_blocks - 1)


def build_critic(cfg: DiscriminatorConfig, in_bands: int, seed: Optional[int] = None) -> _Critic:
    ctx = torch.random.fork_rng(devices=[]) if seed is not None else contextlib.nullcontext()
    with ctx:
        if seed is not None:
            torch.manual_seed(seed)
        if cfg.disc_type == "standard":
            return StandardDiscriminator(in_bands, cfg.base_channels, cfg.linear_size or 1024)
        if cfg.disc_type == "esrgan":
            return ESRGANDiscriminator(in_bands, cfg.base_channels, cfg.linear_size or 1024)
        if cfg.disc_type == "patchgan":
            return PatchGANDiscriminator(in_bands, cfg.base_channels, cfg.n_blocks or 4, cfg.norm or "instance")
        raise AssertionError(f"unsupported disc_type {cfg.disc_type!r}")


def critic_forward(net: _Critic, img: torch.Tensor) -> torch.Tensor:
    return net(img)
