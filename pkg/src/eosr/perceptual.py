"""Feature-space perceptual distances (VGG19 conv5_4 and an LPIPS-style VGG16 metric).

Pretrained trunk weights are never downloaded here. They are looked up at an
explicit path or in the torch hub cache, checksum-verified, and loaded; when
they are missing a :class:`PerceptualWeightsUnavailable` error explains how to
fetch them offline.
"""

from __future__ import annotations

import hashlib
import logging
import re
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn
from torchvision.models import vgg16, vgg19

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision release files; the hex suffix is the sha256 prefix of the file
DEFAULT_FILES = {"vgg19": "vgg19-dcbb9e9d.pth", "lpips": "vgg16-397923af.pth"}
# conv5_4 before its ReLU
VGG19_CONV54_END = 35
# relu1_2, relu2_2, relu3_3, relu4_3, relu5_3
VGG16_LPIPS_SLICES = ((0, 4), (4, 9), (9, 16), (16, 23), (23, 30))
LPIPS_CHANNELS = (64, 128, 256, 512, 512)


class PerceptualWeightsUnavailable(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_weights(backend: str, path: Optional[str] = None, sha256: Optional[str] = None) -> Path:
    """Locate and verify the trunk weight file for ``backend``."""
    if path is not None:
        candidate = Path(path).expanduser()
    else:
        candidate = Path(torch.hub.get_dir()) / "checkpoints" / DEFAULT_FILES[backend]
    if not candidate.is_file():
        raise PerceptualWeightsUnavailable(
            f"perceptual backend {backend!r} needs pretrained weights at {candidate}, which does not exist. "
            f"Download {DEFAULT_FILES[backend]} from the torchvision model zoo on a machine with network "
            "access, copy it there (or set Training.Losses.perceptual_weights), and rerun. "
            "Weights are never downloaded during training."
        )
    digest = None
    if sha256:
        digest = sha256_file(candidate)
        if digest != sha256.lower():
            raise PerceptualWeightsUnavailable(f"checksum mismatch for {candidate}: {digest} != {sha256}")
    else:
        m = re.search(r"-([0-9a-f]{8,})\.pth$", candidate.name)
        if m:
            digest = sha256_file(candidate)
            if not digest.startswith(m.group(1)):
                raise PerceptualWeightsUnavailable(
                    f"checksum mismatch for {candidate}: sha256 {digest[:8]} does not match name suffix {m.group(1)}"
                )
        else:
            log.warning("no checksum available for %s; loading unverified", candidate)
    return candidate


def _load_features(trunk: nn.Sequential, path: Path) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    own = trunk.state_dict()
    missing = [k for k in own if k not in state]
    if missing:
        raise PerceptualWeightsUnavailable(f"{path} lacks trunk parameters, e.g. {missing[:3]}")
    trunk.load_state_dict({k: state[k] for k in own})


def to_three_channels(x: torch.Tensor, rgb_triplet: Sequence[int]) -> torch.Tensor:
    """Select the RGB band triplet (or replicate a single band) and ImageNet-normalize."""
    if x.shape[1] == 1:
        x = x.repeat(1, 3, 1, 1)
    elif x.shape[1] == 3 and tuple(rgb_triplet) == (0, 1, 2):
        pass
    else:
        x = x[:, list(rgb_triplet)]
    mean = x.new_tensor(IMAGENET_MEAN)[None, :, None, None]
    std = x.new_tensor(IMAGENET_STD)[None, :, None, None]
    return (x - mean) / std


class PerceptualLoss(nn.Module):
    """Frozen pretrained feature distance; ``forward(pred, target)`` returns a scalar."""

    def __init__(
        self,
        backend: str = "vgg19",
        weights: Optional[str] = None,
        sha256: Optional[str] = None,
        rgb_triplet: Sequence[int] = (0, 1, 2),
        lpips_weights: Optional[str] = None,
    ):
        super().__init__()
        if backend not in DEFAULT_FILES:
            raise ValueError(f"unknown perceptual backend {backend!r}")
        self.backend = backend
        self.rgb_triplet = tuple(rgb_triplet)
        path = resolve_weights(backend, weights, sha256)
        if backend == "vgg19":
            trunk = vgg19(weights=None).features
            _load_features(trunk, path)
            self.slices = nn.ModuleList([trunk[:VGG19_CONV54_END]])
        else:
            trunk = vgg16(weights=None).features
            _load_features(trunk, path)
            self.slices = nn.ModuleList([trunk[a:b] for a, b in VGG16_LPIPS_SLICES])
            lin = [torch.full((c,), 1.0 / c) for c in LPIPS_CHANNELS]
            if lpips_weights is not None:
                state = torch.load(lpips_weights, map_location="cpu", weights_only=True)
                lin = [state[f"lin{i}.model.1.weight"].flatten().float() for i in range(len(LPIPS_CHANNELS))]
            for i, w in enumerate(lin):
                self.register_buffer(f"lin{i}", w)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # the trunk stays frozen in eval mode
        return super().train(False)

    def _features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for block in self.slices:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
        fp = self._features(to_three_channels(pred, self.rgb_triplet))
        ft = self._features(to_three_channels(target, self.rgb_triplet))
        if self.backend == "vgg19":
            return (fp[0] - ft[0]).abs().mean()
        total = pred.new_zeros(())
        for i, (a, b) in enumerate(zip(fp, ft)):
            a = a / (a.norm(dim=1, keepdim=True) + 1e-10)
            b = b / (b.norm(dim=1, keepdim=True) + 1e-10)
            w = getattr(self, f"lin{i}")[None, :, None, None]
            total = total + ((a - b) ** 2 * w).sum(dim=1).mean()
        return total


def build_perceptual(loss_cfg, rgb_triplet: Sequence[int]) -> PerceptualLoss:
    return PerceptualLoss(
        loss_cfg.perceptual_backend,
        loss_cfg.perceptual_weights,
        loss_cfg.perceptual_sha256,
        rgb_triplet,
        loss_cfg.lpips_weights,
    )


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, backend: PerceptualLoss) -> torch.Tensor:
    return backend(pred, target)
