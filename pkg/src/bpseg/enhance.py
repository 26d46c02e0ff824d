"""Contrast-limited adaptive histogram equalization and histogram reports.

The CLAHE here is pinned bit-exactly so golden-file tests stay stable:

1. pad the image by edge replication so each side divides into the tile
   grid, giving tiles of ``ceil(H/tiles_y) x ceil(W/tiles_x)``;
2. per tile, build a 256-bin histogram, clip each bin at
   ``T = max(1, floor(clip_limit * tile_area / bins))`` and spread the
   clipped excess uniformly over all bins, remainder one count per bin
   starting from bin 0;
3. the tile's mapping is its CDF normalised by tile area, scaled to
   [0, 255] and rounded half-up;
4. each output pixel bilinearly interpolates the mappings of the four
   nearest tile centres at its own intensity (border pixels fall back
   to the nearest tiles), rounded half-up and clamped to [0, 255].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import ConfigError, EmptyInput


class TileTooSmall(ValueError):
    """The tile grid is finer than the image."""


@dataclass(frozen=True)
class EnhanceConfig:
    clip_limit: float = 1.0
    tiles_x: int = 8
    tiles_y: int = 8
    bins: int = 256

    def __post_init__(self):
        if self.clip_limit <= 0:
            raise ConfigError("clip_limit must be positive")
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ConfigError("tile grid must be at least 1x1")
        if self.bins != 256:
            raise ConfigError("only 256-bin histograms are supported")


def _pad_to_grid(image: np.ndarray, cfg: EnhanceConfig) -> tuple[np.ndarray, int, int]:
    h, w = image.shape
    th = -(-h // cfg.tiles_y)
    tw = -(-w // cfg.tiles_x)
    padded = np.pad(
        image, ((0, th * cfg.tiles_y - h), (0, tw * cfg.tiles_x - w)), mode="edge"
    )
    return padded, th, tw


def clip_threshold(cfg: EnhanceConfig, tile_area: int) -> int:
    """Histogram clip level: max(1, floor(clip_limit * area / bins))."""
    return max(1, int(cfg.clip_limit * tile_area / cfg.bins))


def tile_mappings(image: np.ndarray, cfg: EnhanceConfig) -> np.ndarray:
    """Per-tile intensity mappings, shape (tiles_y, tiles_x, 256), uint8.

    Each mapping is monotone non-decreasing; exposed separately so that
    property can be checked directly.
    """
    h, w = image.shape
    if h < cfg.tiles_y or w < cfg.tiles_x:
        raise TileTooSmall(f"{w}x{h} image cannot host a {cfg.tiles_x}x{cfg.tiles_y} grid")
    padded, th, tw = _pad_to_grid(image, cfg)
    area = th * tw
    clip = clip_threshold(cfg, area)

    tiles = padded.reshape(cfg.tiles_y, th, cfg.tiles_x, tw).swapaxes(1, 2)
    luts = np.empty((cfg.tiles_y, cfg.tiles_x, cfg.bins), dtype=np.uint8)
    for i in range(cfg.tiles_y):
        for j in range(cfg.tiles_x):
            hist = np.bincount(tiles[i, j].ravel(), minlength=cfg.bins).astype(np.int64)
            excess = int((hist - clip).clip(min=0).sum())
            hist = np.minimum(hist, clip)
            hist += excess // cfg.bins
            hist[: excess % cfg.bins] += 1
            cdf = np.cumsum(hist)
            luts[i, j] = np.floor(cdf * (255.0 / area) + 0.5).astype(np.uint8)
    return luts


def clahe(image: np.ndarray, cfg: EnhanceConfig = EnhanceConfig()) -> np.ndarray:
    """Enhance a gray image; pure, deterministic, dims preserved."""
    luts = tile_mappings(image, cfg)
    h, w = image.shape
    _, th, tw = _pad_to_grid(image, cfg)

    def axis_weights(n: int, tile: int, tiles: int):
        t = (np.arange(n) + 0.5) / tile - 0.5
        lo = np.floor(t)
        frac = t - lo
        i0 = np.clip(lo, 0, tiles - 1).astype(np.intp)
        i1 = np.clip(lo + 1, 0, tiles - 1).astype(np.intp)
        frac[lo < 0] = 0.0
        frac[lo >= tiles - 1] = 0.0
        return i0, i1, frac

    jx0, jx1, fx = axis_weights(w, tw, cfg.tiles_x)
    iy0, iy1, fy = axis_weights(h, th, cfg.tiles_y)

    ry0 = iy0[:, None]
    ry1 = iy1[:, None]
    cx0 = jx0[None, :]
    cx1 = jx1[None, :]
    v = image
    m00 = luts[ry0, cx0, v].astype(np.float64)
    m01 = luts[ry0, cx1, v].astype(np.float64)
    m10 = luts[ry1, cx0, v].astype(np.float64)
    m11 = luts[ry1, cx1, v].astype(np.float64)
    fxr = fx[None, :]
    fyr = fy[:, None]
    out = (m00 * (1 - fxr) + m01 * fxr) * (1 - fyr) + (m10 * (1 - fxr) + m11 * fxr) * fyr
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class HistogramReport:
    """Pooled 256-bin intensity histogram over a set of images."""

    counts: np.ndarray
    source_tag: str

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin", "count"])
            for b, c in enumerate(self.counts):
                writer.writerow([b, int(c)])

    def to_gnuplot(self, path: Path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# {self.source_tag}\n")
            for b, c in enumerate(self.counts):
                fh.write(f"{b} {int(c)}\n")


def dataset_histogram(images, tag: str) -> HistogramReport:
    """Histogram of all pixels across ``images``; bin b counts intensity b."""
    images = list(images)
    if not images:
        raise EmptyInput("need at least one image")
    counts = np.zeros(256, dtype=np.int64)
    for img in images:
        counts += np.bincount(np.asarray(img, dtype=np.uint8).ravel(), minlength=256)
    counts.flags.writeable = False
    return HistogramReport(counts=counts, source_tag=tag)
