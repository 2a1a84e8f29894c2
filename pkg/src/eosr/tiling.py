"""Overlapping-tile inference for rasters larger than memory.

Tiles are laid out on the LR grid with a fixed stride of
``tile_size_lr - overlap_lr``; the last tile along each axis is shifted inward
so it ends exactly at the raster edge. Each tile is run with an extra context
halo (clipped at the raster border) that is cropped away afterwards, and the
kept outputs are blended with separable ramp weights that sum to one at every
output pixel.
"""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import NormalizationConfig
from .data import denormalize, normalize

log = logging.getLogger(__name__)


def tile_offsets(length: int, tile: int, overlap: int) -> list[int]:
    """Start offsets of tiles of size ``tile`` covering ``[0, length)``."""
    if tile <= 2 * overlap:
        raise ValueError(f"tile size {tile} must exceed twice the overlap {overlap}")
    if length < tile:
        raise ValueError(f"raster length {length} is smaller than the tile size {tile}")
    stride = tile - overlap
    offsets = list(range(0, length - tile, stride))
    offsets.append(length - tile)
    return offsets


def _ramp(n: int, kind: str) -> np.ndarray:
    """Strictly positive increasing ramp of ``n`` samples ending below 1."""
    t = np.arange(1, n + 1, dtype=np.float64) / (n + 1)
    if kind == "linear":
        return t
    if kind == "cosine":
        return 0.5 * (1.0 - np.cos(np.pi * t))
    raise ValueError(f"unknown blend profile {kind!r}")


def axis_weights(length: int, offsets: list[int], tile: int, overlap: int, kind: str = "linear") -> list[np.ndarray]:
    """Per-tile 1-D blend weights along one axis, normalized to sum to 1 everywhere."""
    raw = []
    for i, off in enumerate(offsets):
        w = np.ones(tile)
        if overlap > 0:
            if i > 0:
                w[:overlap] = _ramp(overlap, kind)
            if i < len(offsets) - 1:
                w[-overlap:] = _ramp(overlap, kind)[::-1]
        raw.append(w)
    total = np.zeros(length)
    for off, w in zip(offsets, raw):
        total[off : off + tile] += w
    return [w / total[off : off + tile] for off, w in zip(offsets, raw)]


@dataclass(frozen=True)
class Window:
    row: int
    col: int
    h: int
    w: int


@dataclass
class TileGrid:
    """Tile windows on the LR grid plus their separable blend weights."""

    height: int
    width: int
    tile_size_lr: int
    overlap_lr: int
    row_offsets: list[int]
    col_offsets: list[int]
    row_weights: list[np.ndarray]
    col_weights: list[np.ndarray]
    blend: str = "linear"

    @property
    def windows(self) -> list[Window]:
        th, tw = self.tile_shape
        return [Window(r, c, th, tw) for r in self.row_offsets for c in self.col_offsets]

    @property
    def tile_shape(self) -> tuple[int, int]:
        return min(self.tile_size_lr, self.height), min(self.tile_size_lr, self.width)

    @property
    def blend_profile(self) -> np.ndarray:
        return _ramp(self.overlap_lr, self.blend)

    def weight(self, i: int, j: int, scale: int = 1) -> np.ndarray:
        """2-D weight of tile (row index ``i``, col index ``j``) at output resolution."""
        wr = np.repeat(self.row_weights[i], scale)
        wc = np.repeat(self.col_weights[j], scale)
        return np.outer(wr, wc)

    def weight_sum(self, scale: int = 1) -> np.ndarray:
        total = np.zeros((self.height * scale, self.width * scale))
        th, tw = self.tile_shape
        for i, r in enumerate(self.row_offsets):
            for j, c in enumerate(self.col_offsets):
                total[r * scale : (r + th) * scale, c * scale : (c + tw) * scale] += self.weight(i, j, scale)
        return total

    def coverage_count(self) -> np.ndarray:
        count = np.zeros((self.height, self.width), dtype=np.int32)
        for win in self.windows:
            count[win.row : win.row + win.h, win.col : win.col + win.w] += 1
        return count


def plan_tiles(raster_dims: tuple[int, int], tile_size_lr: int, overlap_lr: int, blend: str = "linear") -> TileGrid:
    """Tile layout for an LR raster of ``(height, width)``.

    A tile larger than the raster along an axis is clamped to the raster
    size on that axis (one tile, unit weights).
    """
    height, width = raster_dims
    if height < 1 or width < 1:
        raise ValueError(f"raster dimensions must be positive, got {raster_dims}")
    if tile_size_lr <= 2 * overlap_lr:
        raise ValueError(f"tile_size_lr {tile_size_lr} must exceed 2 * overlap_lr ({2 * overlap_lr})")
    if overlap_lr < 0:
        raise ValueError("overlap_lr must be non-negative")
    th, tw = min(tile_size_lr, height), min(tile_size_lr, width)
    ov_h = overlap_lr if th == tile_size_lr else 0
    ov_w = overlap_lr if tw == tile_size_lr else 0
    rows = tile_offsets(height, th, ov_h) if th < height else [0]
    cols = tile_offsets(width, tw, ov_w) if tw < width else [0]
    return TileGrid(
        height,
        width,
        tile_size_lr,
        overlap_lr,
        rows,
        cols,
        axis_weights(height, rows, th, ov_h, blend),
        axis_weights(width, cols, tw, ov_w, blend),
        blend,
    )


def _run_tiles(
    read: Callable[[int, int, int, int], np.ndarray],
    net: torch.nn.Module,
    grid: TileGrid,
    scale: int,
    out: np.ndarray,
    context_lr: int,
    z: Optional[torch.Tensor],
    device: torch.device,
) -> None:
    """Accumulate blended tile outputs into ``out`` (bands, H*scale, W*scale)."""
    th, tw = grid.tile_shape
    dtype = next(net.parameters()).dtype
    for i, r in enumerate(grid.row_offsets):
        for j, c in enumerate(grid.col_offsets):
            r0, c0 = max(r - context_lr, 0), max(c - context_lr, 0)
            r1, c1 = min(r + th + context_lr, grid.height), min(c + tw + context_lr, grid.width)
            patch = torch.from_numpy(np.asarray(read(r0, c0, r1 - r0, c1 - c0)))[None].to(device=device, dtype=dtype)
            with torch.no_grad():
                sr = net(patch, z.to(dtype)) if z is not None else net(patch)
            sr = sr[0].double().cpu().numpy()
            dr, dc = (r - r0) * scale, (c - c0) * scale
            sr = sr[:, dr : dr + th * scale, dc : dc + tw * scale]
            out[:, r * scale : (r + th) * scale, c * scale : (c + tw) * scale] += sr * grid.weight(i, j, scale)


def _scene_latent(net, seed: Optional[int]) -> Optional[torch.Tensor]:
    if not getattr(net, "is_conditional", False):
        return None
    return net.sample_noise(1, seed=0 if seed is None else seed)


def infer_array(
    net: torch.nn.Module,
    lr: np.ndarray,
    grid: Optional[TileGrid] = None,
    tile_size_lr: int = 512,
    overlap_lr: int = 32,
    context_lr: Optional[int] = None,
    blend: str = "linear",
    latent_seed: Optional[int] = None,
) -> np.ndarray:
    """Tiled SR of an in-memory normalized LR array ``(bands, h, w)``; returns float64."""
    scale = int(net.scale)
    bands, h, w = lr.shape
    if bands != net.in_bands:
        raise ValueError(f"input has {bands} bands, network expects {net.in_bands}")
    grid = grid or plan_tiles((h, w), tile_size_lr, overlap_lr, blend)
    context = grid.overlap_lr if context_lr is None else context_lr
    device = next(net.parameters()).device
    out = np.zeros((net.out_bands, h * scale, w * scale))
    was_training = net.training
    net.eval()
    try:
        _run_tiles(lambda r, c, hh, ww: lr[:, r : r + hh, c : c + ww], net, grid, scale, out, context,
                   _scene_latent(net, latent_seed), device)
    finally:
        net.train(was_training)
    return out


def _cast(arr: np.ndarray, dtype: np.dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.rint(arr), info.min, info.max).astype(dtype)
    return arr.astype(dtype)


def infer_scene(
    net: torch.nn.Module,
    raster_path: str | Path,
    out_path: str | Path,
    grid: Optional[TileGrid] = None,
    latent_seed: Optional[int] = None,
    normalization: Optional[NormalizationConfig] = None,
    tile_size_lr: int = 512,
    overlap_lr: int = 32,
    context_lr: Optional[int] = None,
    blend: str = "linear",
    output_dtype: str = "same",
    rows_per_write: int = 256,
) -> Path:
    """Super-resolve a GeoTIFF tile by tile and write a georeferenced GeoTIFF.

    Input pixels are normalized with ``normalization`` (identity when None)
    and the output is denormalized back, then cast to the input dtype
    (``output_dtype="same"``, rounding and clipping for integers) or float32.
    Tile outputs accumulate in a disk-backed buffer, so resident memory is a
    few tiles regardless of scene size. A partially written output file is
    removed if anything fails.
    """
    import rasterio
    from rasterio.windows import Window as RioWindow

    out_path = Path(out_path)
    scale = int(net.scale)
    device = next(net.parameters()).device
    tmp_path = None
    writing = False
    try:
        with rasterio.open(raster_path) as src:
            if src.count != net.in_bands:
                raise ValueError(f"{raster_path}: {src.count} bands, network expects {net.in_bands}")
            h, w = src.height, src.width
            grid = grid or plan_tiles((h, w), tile_size_lr, overlap_lr, blend)
            if (grid.height, grid.width) != (h, w):
                raise ValueError(f"tile grid is for {grid.height}x{grid.width}, raster is {h}x{w}")
            context = grid.overlap_lr if context_lr is None else context_lr

            def read(r, c, hh, ww):
                raw = src.read(window=RioWindow(c, r, ww, hh)).astype(np.float64)
                return normalize(raw, normalization) if normalization is not None else raw.astype(np.float32)

            fd, tmp_name = tempfile.mkstemp(suffix=".acc", dir=out_path.parent if out_path.parent.exists() else None)
            os.close(fd)
            tmp_path = Path(tmp_name)
            acc = np.memmap(tmp_path, dtype=np.float64, mode="w+", shape=(net.out_bands, h * scale, w * scale))
            was_training = net.training
            net.eval()
            try:
                _run_tiles(read, net, grid, scale, acc, context, _scene_latent(net, latent_seed), device)
            finally:
                net.train(was_training)
            acc.flush()

            dtype = np.dtype(src.dtypes[0]) if output_dtype == "same" else np.dtype(np.float32)
            profile = dict(src.profile)
            profile.update(
                driver="GTiff",
                count=net.out_bands,
                height=h * scale,
                width=w * scale,
                dtype=dtype.name,
                transform=src.transform @ rasterio.Affine.scale(1.0 / scale),
                compress="deflate",
            )
            if h * scale >= 256 and w * scale >= 256:
                profile.update(tiled=True, blockxsize=256, blockysize=256)
            else:
                profile.update(tiled=False)
                profile.pop("blockxsize", None)
                profile.pop("blockysize", None)

        out_path.parent.mkdir(parents=True, exist_ok=True)
        writing = True
        with rasterio.open(out_path, "w", **profile) as dst:
            for r in range(0, h * scale, rows_per_write):
                rows = acc[:, r : r + rows_per_write]
                block = denormalize(rows, normalization) if normalization is not None else np.asarray(rows)
                dst.write(_cast(block, dtype), window=RioWindow(0, r, w * scale, rows.shape[1]))
        del acc
    except BaseException:
        if writing and out_path.exists():
            out_path.unlink()
        raise
    finally:
        if tmp_path is not None and tmp_path.exists():
            tmp_path.unlink()
    return out_path
