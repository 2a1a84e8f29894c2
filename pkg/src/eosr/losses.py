"""Content and adversarial losses and the weighted generator objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch.nn import functional as F

from .config import LossConfig

SAM_EPS = 1e-8
SAM_CLAMP = 1e-7


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, target)
    return (pred - target).abs().mean()


def sam_per_pixel(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Spectral angle (radians) between band vectors, shape ``(B, H, W)``."""
    _check_same_shape(pred, target)
    dot = (pred * target).sum(dim=1)
    norms = pred.norm(dim=1) * target.norm(dim=1)
    cos = (dot / (norms + SAM_EPS)).clamp(-1 + SAM_CLAMP, 1 - SAM_CLAMP)
    return torch.acos(cos)


def sam_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean spectral angle mapper over all pixels, in radians."""
    return sam_per_pixel(pred, target).mean()


def tv_loss(pred: torch.Tensor) -> torch.Tensor:
    """Anisotropic L1 total variation: mean |dx| + mean |dy|.

    A spatial axis of length 1 contributes no differences (and zero).
    """
    h, w = pred.shape[-2:]
    if h < 2 and w < 2:
        raise ValueError(f"total variation needs at least 2 pixels along one axis, got {h}x{w}")
    total = pred.new_zeros(())
    if w >= 2:
        total = total + (pred[..., :, 1:] - pred[..., :, :-1]).abs().mean()
    if h >= 2:
        total = total + (pred[..., 1:, :] - pred[..., :-1, :]).abs().mean()
    return total


def label_targets(smoothing: float) -> tuple[float, float]:
    """(real, fake) discriminator targets after label smoothing."""
    return 1.0 - smoothing, smoothing


def adversarial_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def adversarial_d_loss(
    real_logits: torch.Tensor, fake_logits: torch.Tensor, smoothing: float = 0.0
) -> torch.Tensor:
    real_t, fake_t = label_targets(smoothing)
    real = F.binary_cross_entropy_with_logits(real_logits, torch.full_like(real_logits, real_t))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.full_like(fake_logits, fake_t))
    return 0.5 * (real + fake)


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    sam: torch.Tensor
    perceptual: torch.Tensor
    tv: torch.Tensor
    adversarial: torch.Tensor
    content_total: torch.Tensor
    g_total: torch.Tensor
    weights: dict[str, float] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        names = ("l1", "sam", "perceptual", "tv", "adversarial", "content_total", "g_total")
        return {n: float(getattr(self, n).detach()) for n in names}


def compose_g_objective(
    pred: torch.Tensor,
    target: torch.Tensor,
    fake_logits: Optional[torch.Tensor],
    cfg: LossConfig,
    adv_weight_now: float,
    perceptual=None,
) -> LossBreakdown:
    """Weighted generator objective.

    Terms whose weight is zero are reported as 0 without being evaluated
    (except L1, which is cheap and always logged). ``perceptual`` is a
    callable ``(pred, target) -> scalar``; required when ``w_perceptual > 0``.
    """
    zero = pred.new_zeros(())
    l1 = l1_loss(pred, target)
    sam = sam_loss(pred, target) if cfg.w_sam > 0 else zero
    tv = tv_loss(pred) if cfg.w_tv > 0 else zero
    if cfg.w_perceptual > 0:
        if perceptual is None:
            raise ValueError("w_perceptual > 0 but no perceptual backend was supplied")
        perc = perceptual(pred, target)
    else:
        perc = zero
    adv = adversarial_g_loss(fake_logits) if fake_logits is not None else zero

    content = cfg.w_l1 * l1 + cfg.w_sam * sam + cfg.w_perceptual * perc + cfg.w_tv * tv
    total = content + adv_weight_now * adv if adv_weight_now else content
    weights = {
        "w_l1": cfg.w_l1,
        "w_sam": cfg.w_sam,
        "w_perceptual": cfg.w_perceptual,
        "w_tv": cfg.w_tv,
        "w_adv": float(adv_weight_now),
    }
    return LossBreakdown(l1, sam, perc, tv, adv, content, total, weights)
