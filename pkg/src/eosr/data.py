"""Paired LR/HR data: degradation, reflectance normalization, GeoTIFF I/O and datasets.

Arrays are ``(bands, height, width)`` numpy arrays until they reach a
``DataLoader``; batches are ``(batch, bands, height, width)`` float tensors.

On-disk layouts under ``Data.root``:

* ``paired_dirs``: ``<split>/lr/<stem>.tif`` and ``<split>/hr/<stem>.tif``.
* ``synthetic_degradation``: ``<split>/hr/<stem>.tif`` (or ``<split>/*.tif``);
  LR is produced by :func:`degrade`.

A ``manifest.json`` in the root overrides directory discovery::

    {"bands": ["B4", ...], "train": [{"lr": "a_lr.tif", "hr": "a_hr.tif"}], "val": [...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch.nn import functional as F
from torch.utils.data import DataLoader, Dataset

from .config import DataConfig, NormalizationConfig

SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


# ---------------------------------------------------------------------------
# degradation and resampling


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Area-average downsampling: each ``scale x scale`` block becomes its mean."""
    bands, h, w = hr.shape
    if h % scale or w % scale:
        raise ValueError(f"HR size {h}x{w} is not divisible by scale {scale}")
    blocks = hr.reshape(bands, h // scale, scale, w // scale, scale)
    return blocks.mean(axis=(2, 4), dtype=np.float64).astype(hr.dtype if hr.dtype.kind == "f" else np.float32)


def degrade_batch(hr: torch.Tensor, scale: int) -> torch.Tensor:
    if hr.shape[-1] % scale or hr.shape[-2] % scale:
        raise ValueError(f"HR size {tuple(hr.shape[-2:])} is not divisible by scale {scale}")
    return F.avg_pool2d(hr, scale)


def bicubic_upsample(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """Bicubic baseline (pixel-centre aligned), batch tensor in and out."""
    return F.interpolate(lr, scale_factor=scale, mode="bicubic", align_corners=False)


# ---------------------------------------------------------------------------
# normalization


def _per_band(value, bands: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full((bands, 1, 1), float(arr))
    if arr.shape[0] != bands:
        raise ValueError(f"normalization parameter has {arr.shape[0]} entries for {bands} bands")
    return arr.reshape(bands, 1, 1)


def normalize(raw: np.ndarray, cfg: NormalizationConfig) -> np.ndarray:
    """Map raw values (e.g. reflectance x 10^4) to the network's working range."""
    raw = np.asarray(raw, dtype=np.float64)
    bands = raw.shape[0]
    if cfg.kind == "reflectance_scale":
        out = np.clip(raw / cfg.divisor, 0.0, cfg.ceiling) / cfg.ceiling
    elif cfg.kind == "minmax":
        lo, hi = _per_band(cfg.min, bands), _per_band(cfg.max, bands)
        if np.any(hi - lo <= 0):
            raise ValueError("minmax normalization has a zero range")
        out = (raw - lo) / (hi - lo)
    elif cfg.kind == "zscore":
        out = (raw - _per_band(cfg.mean, bands)) / _per_band(cfg.std, bands)
    else:
        raise ValueError(f"unknown normalization {cfg.kind!r}")
    return out.astype(np.float32)


def denormalize(norm: np.ndarray, cfg: NormalizationConfig) -> np.ndarray:
    norm = np.asarray(norm, dtype=np.float64)
    bands = norm.shape[0]
    if cfg.kind == "reflectance_scale":
        return norm * cfg.ceiling * cfg.divisor
    if cfg.kind == "minmax":
        lo, hi = _per_band(cfg.min, bands), _per_band(cfg.max, bands)
        return norm * (hi - lo) + lo
    if cfg.kind == "zscore":
        return norm * _per_band(cfg.std, bands) + _per_band(cfg.mean, bands)
    raise ValueError(f"unknown normalization {cfg.kind!r}")


# ---------------------------------------------------------------------------
# GeoTIFF I/O


def read_raster(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a multiband raster as ``(bands, h, w)`` plus its rasterio profile."""
    import rasterio

    with rasterio.open(path) as src:
        return src.read(), dict(src.profile)


def write_raster(path: str | Path, array: np.ndarray, profile: Optional[dict] = None, **overrides) -> None:
    import rasterio

    bands, h, w = array.shape
    prof = {"driver": "GTiff"}
    if profile:
        prof.update(profile)
    prof.update(count=bands, height=h, width=w, dtype=array.dtype.name)
    prof.update(overrides)
    with rasterio.open(path, "w", **prof) as dst:
        dst.write(array)


# ---------------------------------------------------------------------------
# augmentation


def augment_pair(lr: np.ndarray, hr: np.ndarray, hflip: bool, vflip: bool, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply the same flip/rot90 transform to both images of a pair."""

    def tf(a: np.ndarray) -> np.ndarray:
        if hflip:
            a = a[:, :, ::-1]
        if vflip:
            a = a[:, ::-1, :]
        if k:
            a = np.rot90(a, k, axes=(1, 2))
        return np.ascontiguousarray(a)

    return tf(lr), tf(hr)


# ---------------------------------------------------------------------------
# procedural textures


def procedural_texture(rng: np.random.Generator, size: int, bands: int) -> np.ndarray:
    """A random multiband texture in [0, 1]: gratings, hard-edged shapes and smooth noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = np.zeros((size, size))
    for _ in range(rng.integers(1, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 14)
        phase = rng.uniform(0, 2 * np.pi)
        base += rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(rng.integers(2, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.05, 0.3, 2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        base += rng.uniform(-0.8, 0.8) * mask
    coarse = rng.normal(size=(8, 8))
    smooth = torch.from_numpy(coarse)[None, None]
    smooth = F.interpolate(smooth, size=(size, size), mode="bicubic", align_corners=False)[0, 0].numpy()
    base += 0.3 * smooth
    base = (base - base.min()) / (np.ptp(base) + 1e-12)

    out = np.empty((bands, size, size), dtype=np.float32)
    for b in range(bands):
        gain = rng.uniform(0.5, 1.0)
        offset = rng.uniform(0.0, 0.3)
        out[b] = np.clip(offset + gain * base + 0.05 * smooth * rng.uniform(-1, 1), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class PairSample:
    lr: np.ndarray
    hr: np.ndarray
    geo: Optional[dict] = None
    name: str = ""

    def __post_init__(self):
        bl, hl, wl = self.lr.shape
        bh, hh, wh = self.hr.shape
        if bl != bh:
            raise ValueError(f"{self.name}: LR has {bl} bands, HR has {bh}")
        if hh % hl or wh % wl or hh // hl != wh // wl:
            raise ValueError(f"{self.name}: HR {hh}x{wh} is not an integer multiple of LR {hl}x{wl}")


class _PairDataset(Dataset):
    """Common crop/augment/determinism logic.

    Training crops are drawn from an RNG seeded by ``(seed, split, epoch,
    index)``, so a given epoch always yields the same patches; validation uses
    a fixed grid of non-overlapping patches.
    """

    def __init__(self, cfg: DataConfig, split: str, seed: int = 0):
        self.cfg = cfg
        self.split = split
        self.seed = seed
        self.scale = cfg.scale
        self.epoch = 0
        self.train = split == "train"

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, SPLIT_IDS.get(self.split, 3), self.epoch, index])

    def _augment(self, lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator):
        aug = self.cfg.augmentation
        if not self.train:
            return lr, hr
        hflip = aug.flips and rng.random() < 0.5
        vflip = aug.flips and rng.random() < 0.5
        k = int(rng.integers(0, 4)) if aug.rot90 else 0
        return augment_pair(lr, hr, hflip, vflip, k)

    def __getitem__(self, index: int) -> dict[str, Any]:
        sample = self.get_pair(index)
        return {
            "lr": torch.from_numpy(np.ascontiguousarray(sample.lr, dtype=np.float32)),
            "hr": torch.from_numpy(np.ascontiguousarray(sample.hr, dtype=np.float32)),
        }

    def get_pair(self, index: int) -> PairSample:
        raise NotImplementedError


class ProceduralDataset(_PairDataset):
    """In-memory procedural textures, area-degraded by ``scale``."""

    def __init__(self, cfg: DataConfig, split: str, seed: int = 0):
        super().__init__(cfg, split, seed)
        n = cfg.num_samples if self.train else cfg.num_val_samples
        bands = len(cfg.bands)
        base = np.random.default_rng([seed, 1000 + SPLIT_IDS.get(split, 3)])
        self.hr = [procedural_texture(base, cfg.patch_size_hr, bands) for _ in range(n)]

    def __len__(self) -> int:
        return len(self.hr)

    def get_pair(self, index: int) -> PairSample:
        hr = self.hr[index]
        lr = degrade(hr, self.scale)
        lr, hr = self._augment(lr, hr, self.rng(index))
        return PairSample(lr, hr, name=f"procedural_{index}")


def _discover(cfg: DataConfig, split: str) -> list[dict[str, Optional[Path]]]:
    root = Path(cfg.root)
    manifest = root / "manifest.json"
    if manifest.is_file():
        listing = json.loads(manifest.read_text())
        if "bands" in listing and list(listing["bands"]) != list(cfg.bands):
            raise ValueError(f"{manifest}: band order {listing['bands']} differs from Data.bands {cfg.bands}")
        entries = listing.get(split, [])
        return [
            {"lr": root / e["lr"] if e.get("lr") else None, "hr": root / e["hr"]}
            for e in entries
        ]
    split_dir = root / split
    if cfg.source == "paired_dirs":
        hr_files = sorted((split_dir / "hr").glob("*.tif*"))
        pairs = []
        for hr in hr_files:
            lr = split_dir / "lr" / hr.name
            if not lr.is_file():
                raise FileNotFoundError(f"missing LR pair for {hr}: expected {lr}")
            pairs.append({"lr": lr, "hr": hr})
        return pairs
    hr_dir = split_dir / "hr" if (split_dir / "hr").is_dir() else split_dir
    return [{"lr": None, "hr": p} for p in sorted(hr_dir.glob("*.tif*"))]


class SceneDataset(_PairDataset):
    """GeoTIFF scenes, either paired on disk or degraded on the fly."""

    def __init__(self, cfg: DataConfig, split: str, seed: int = 0):
        super().__init__(cfg, split, seed)
        self.pairs = _discover(cfg, split)
        if not self.pairs:
            raise FileNotFoundError(f"no {split} scenes found under {cfg.root}")
        self.items: list[tuple[int, int, int]] = []  # (scene, row, col) for validation grid
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, dict]] = {}
        p = cfg.patch_size_hr
        for i in range(len(self.pairs)):
            lr, hr, _ = self._scene(i)
            if self.train:
                self.items.append((i, -1, -1))
            else:
                _, h, w = hr.shape
                for r in range(0, h - p + 1, p):
                    for c in range(0, w - p + 1, p):
                        self.items.append((i, r, c))

    def _scene(self, i: int) -> tuple[np.ndarray, np.ndarray, dict]:
        if i in self._cache:
            return self._cache[i]
        entry = self.pairs[i]
        hr_raw, profile = read_raster(entry["hr"])
        if hr_raw.shape[0] != len(self.cfg.bands):
            raise ValueError(f"{entry['hr']}: {hr_raw.shape[0]} bands, config lists {len(self.cfg.bands)}")
        hr = normalize(hr_raw, self.cfg.normalization)
        if entry["lr"] is not None:
            lr_raw, _ = read_raster(entry["lr"])
            if lr_raw.shape[0] != hr_raw.shape[0]:
                raise ValueError(f"{entry['lr']}: band count {lr_raw.shape[0]} != HR band count {hr_raw.shape[0]}")
            if lr_raw.shape[1] * self.scale != hr.shape[1] or lr_raw.shape[2] * self.scale != hr.shape[2]:
                raise ValueError(
                    f"{entry['lr']}: LR {lr_raw.shape[1:]} x scale {self.scale} != HR {hr.shape[1:]}"
                )
            lr = normalize(lr_raw, self.cfg.normalization)
        else:
            h, w = hr.shape[1:]
            hr = hr[:, : h - h % self.scale, : w - w % self.scale]
            lr = degrade(hr, self.scale)
        p = self.cfg.patch_size_hr
        if hr.shape[1] < p or hr.shape[2] < p:
            raise ValueError(f"{entry['hr']}: scene {hr.shape[1:]} smaller than patch_size_hr {p}")
        self._cache[i] = (lr, hr, profile)
        return self._cache[i]

    def __len__(self) -> int:
        return len(self.items)

    def get_pair(self, index: int) -> PairSample:
        scene, r, c = self.items[index]
        lr, hr, profile = self._scene(scene)
        p, s = self.cfg.patch_size_hr, self.scale
        rng = self.rng(index)
        if r < 0:
            # random crop aligned to the LR grid
            r = int(rng.integers(0, (hr.shape[1] - p) // s + 1)) * s
            c = int(rng.integers(0, (hr.shape[2] - p) // s + 1)) * s
        hr_patch = hr[:, r : r + p, c : c + p]
        lr_patch = lr[:, r // s : (r + p) // s, c // s : (c + p) // s]
        lr_patch, hr_patch = self._augment(lr_patch, hr_patch, rng)
        name = Path(self.pairs[scene]["hr"]).stem
        return PairSample(lr_patch, hr_patch, geo={"profile": profile, "offset": (r, c)}, name=name)


def make_dataset(cfg: DataConfig, split: str, seed: int = 0) -> _PairDataset:
    if split not in SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    if cfg.source == "procedural":
        return ProceduralDataset(cfg, split, seed)
    return SceneDataset(cfg, split, seed)


def make_loader(dataset: _PairDataset, batch_size: int, shuffle: bool, seed: int = 0, num_workers: int = 0) -> DataLoader:
    gen = torch.Generator().manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        drop_last=shuffle and len(dataset) >= batch_size,
        generator=gen,
        num_workers=num_workers,
    )
