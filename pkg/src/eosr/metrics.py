"""Validation metrics (PSNR, SSIM, SAM, perceptual) and comparison reports.

All metrics operate in normalized space with ``data_range = 1.0`` unless told
otherwise. The perceptual column is a distance: lower means more similar.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import bicubic_upsample
from .losses import sam_loss

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRIC_COLUMNS = ("psnr_db", "ssim", "sam_rad", "perceptual")
NOTES = {
    "space": "normalized reflectance, data_range=1.0",
    "perceptual": "feature-space distance; lower = more similar",
    "psnr_db": "inf when prediction equals reference",
}


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim == 3:
        x = x[None]
    return x.to(torch.float64)


def psnr(pred, target, data_range: float = 1.0) -> float:
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(((pred - target) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over bands and images.

    Statistics are computed only where the window fits inside the image.
    """
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    b, c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, pred.dtype)
    x = pred.reshape(b * c, 1, h, w)
    y = target.reshape(b * c, 1, h, w)

    def blur(t: torch.Tensor) -> torch.Tensor:
        t = F.conv2d(t, g.view(1, 1, 1, -1))
        return F.conv2d(t, g.view(1, 1, -1, 1))

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return float(smap.mean())


def sam(pred, target) -> float:
    return float(sam_loss(_as_batch(pred), _as_batch(target)))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregate: dict[str, float] = field(default_factory=dict)
    baseline_aggregate: dict[str, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=lambda: dict(NOTES))

    @property
    def n_samples(self) -> int:
        return len(self.rows)

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

        return {
            "n_samples": self.n_samples,
            "columns": list(METRIC_COLUMNS),
            "aggregate": clean(self.aggregate),
            "baseline_bicubic": clean(self.baseline_aggregate),
            "rows": [clean(r) for r in self.rows],
            "notes": self.notes,
        }

    def write(self, json_path: str | Path, csv_path: Optional[str | Path] = None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        # inf is not valid JSON; it is written as the string "inf"
        text = json.dumps(self.to_dict(), indent=2, default=str).replace("Infinity", '"inf"')
        json_path.write_text(text)
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        if self.rows:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(self.rows[0].keys()))
                writer.writeheader()
                writer.writerows(self.rows)


def _mean(values: list[float]) -> float:
    values = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
    if not values:
        return math.nan
    return float(np.mean(values))


def _score(pred: torch.Tensor, target: torch.Tensor, perceptual: Optional[Callable], data_range: float) -> dict:
    out = {
        "psnr_db": psnr(pred, target, data_range),
        "ssim": ssim(pred, target, data_range),
        "sam_rad": sam(pred, target),
        "perceptual": math.nan,
    }
    if perceptual is not None:
        with torch.no_grad():
            out["perceptual"] = float(perceptual(pred[None].float(), target[None].float()))
    return out


def evaluate(
    sr: Sequence,
    hr: Sequence,
    lr: Sequence,
    scale: int,
    perceptual: Optional[Callable] = None,
    names: Optional[Sequence[str]] = None,
    data_range: float = 1.0,
) -> EvalReport:
    """Score SR outputs against HR references, alongside a bicubic-from-LR baseline."""
    if not (len(sr) == len(hr) == len(lr)):
        raise ValueError(f"mismatched pair counts: sr={len(sr)} hr={len(hr)} lr={len(lr)}")
    if len(sr) == 0:
        raise ValueError("nothing to evaluate")
    report = EvalReport()
    for i, (s, h, l) in enumerate(zip(sr, hr, lr)):
        s, h, l = (torch.as_tensor(a).to(torch.float64) for a in (s, h, l))
        base = bicubic_upsample(l[None], scale)[0]
        model_scores = _score(s, h, perceptual, data_range)
        base_scores = _score(base, h, perceptual, data_range)
        row = {"name": names[i] if names else str(i)}
        row.update(model_scores)
        row.update({f"bicubic_{k}": v for k, v in base_scores.items()})
        report.rows.append(row)
    report.aggregate = {k: _mean([r[k] for r in report.rows]) for k in METRIC_COLUMNS}
    report.baseline_aggregate = {k: _mean([r[f"bicubic_{k}"] for r in report.rows]) for k in METRIC_COLUMNS}
    return report


def rgb_preview(lr: np.ndarray, sr: np.ndarray, hr: np.ndarray, rgb_triplet: Sequence[int], path: str | Path) -> None:
    """Save an LR | SR | HR side-by-side PNG of the RGB triplet (LR nearest-upsampled)."""
    from PIL import Image

    def rgb(a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        a = a[list(rgb_triplet)] if a.shape[0] >= 3 else np.repeat(a[:1], 3, axis=0)
        return np.clip(a.transpose(1, 2, 0), 0, 1)

    h, w = hr.shape[1:]
    factor = h // lr.shape[1]
    lr_up = np.kron(rgb(lr), np.ones((factor, factor, 1)))
    panel = np.concatenate([lr_up, rgb(sr), rgb(hr)], axis=1)
    lo, hi = np.percentile(panel, (1, 99))
    panel = np.clip((panel - lo) / max(hi - lo, 1e-6), 0, 1)
    Image.fromarray((panel * 255).astype(np.uint8)).save(path)
