"""Geometric preprocessing: ROI crops, resizing, rasterization, augmentation.

Every operation here is pure; ``random_crop`` and ``augment_sixfold``
are deterministic given their seed. Masks stay binary throughout
(nearest-neighbour resampling), images are resampled bilinearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import ConfigError, Device, ShapeMismatch, derive_seed


class ImageTooSmall(ValueError):
    """The requested ROI extends past the image bounds."""


class CropTooLarge(ValueError):
    """A random crop larger than its input was requested."""


class DegeneratePolygon(ValueError):
    """A polygon with fewer than three distinct vertices."""


@dataclass(frozen=True)
class DeviceCropProfile:
    """Fixed ROI of the informative area inside a device's screen capture."""

    device: Device
    origin_x: int
    origin_y: int
    crop_width: int
    crop_height: int


CROP_PROFILES: dict[Device, DeviceCropProfile] = {
    Device.YGY: DeviceCropProfile(Device.YGY, 87, 47, 510, 356),
    Device.BK3000_IF1: DeviceCropProfile(Device.BK3000_IF1, 278, 174, 553, 492),
    Device.BK3000_IF2: DeviceCropProfile(Device.BK3000_IF2, 165, 172, 595, 529),
}


def profile_for(device: Device, frame_shape: tuple[int, int]) -> DeviceCropProfile:
    """Crop profile for a device; synthetic frames pass through whole."""
    if device in CROP_PROFILES:
        return CROP_PROFILES[device]
    h, w = frame_shape
    return DeviceCropProfile(device, 0, 0, w, h)


@dataclass(frozen=True)
class AugmentConfig:
    """Six-fold augmentation: original + 2 random crops, then both flipped.

    The source ROI is resized to ``pre_crop_size`` square before the
    random crops so crops at ``final_size`` have room to move.
    """

    pre_crop_size: int = 256
    final_size: int = 224
    crops_per_image: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (self.pre_crop_size > self.final_size > 0):
            raise ConfigError(
                f"need pre_crop_size > final_size > 0, got "
                f"{self.pre_crop_size} / {self.final_size}"
            )
        if self.crops_per_image < 0:
            raise ConfigError("crops_per_image must be >= 0")


def crop_roi(frame: np.ndarray, profile: DeviceCropProfile) -> np.ndarray:
    """Extract the profile's ROI; output pixel (0,0) is frame (origin_x, origin_y)."""
    h, w = frame.shape
    x0, y0 = profile.origin_x, profile.origin_y
    x1, y1 = x0 + profile.crop_width, y0 + profile.crop_height
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ImageTooSmall(
            f"ROI {x0},{y0}+{profile.crop_width}x{profile.crop_height} "
            f"exceeds {w}x{h} frame"
        )
    return frame[y0:y1, x0:x1].copy()


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _source_coords(n_dst: int, n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-centre convention: dst centre i+0.5 maps to src (i+0.5)*scale
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    lo = np.clip(np.floor(pos), 0, n_src - 1).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    return lo, hi, frac


def resize_image(image: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of a gray image, rounded half-up back to uint8."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dimensions must be positive")
    src = image.astype(np.float64)
    h, w = src.shape
    if (w, h) == (target_w, target_h):
        return image.copy()
    x0, x1, fx = _source_coords(target_w, w)
    y0, y1, fy = _source_coords(target_h, h)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(_round_half_up(out), 0, 255).astype(np.uint8)


def resize_mask(mask: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask; stays binary."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dimensions must be positive")
    h, w = mask.shape
    if (w, h) == (target_w, target_h):
        return mask.copy()
    xs = np.minimum((((np.arange(target_w) + 0.5) * w / target_w)).astype(np.intp), w - 1)
    ys = np.minimum((((np.arange(target_h) + 0.5) * h / target_h)).astype(np.intp), h - 1)
    return mask[ys][:, xs].astype(np.uint8)


def _distinct_vertices(poly) -> int:
    pts = [tuple(map(float, p)) for p in poly]
    return len(set(pts))


def rasterize_polygons(polys, w: int, h: int) -> np.ndarray:
    """Union of polygons as a mask: pixel (x, y) is 1 iff its centre
    (x+0.5, y+0.5) lies inside at least one polygon by the even-odd rule."""
    if w <= 0 or h <= 0:
        raise ValueError("canvas dimensions must be positive")
    mask = np.zeros((h, w), dtype=bool)
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    px = np.broadcast_to(cx, (h, w))
    py = np.broadcast_to(cy[:, None], (h, w))
    for poly in polys:
        v = np.asarray(poly, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or not np.isfinite(v).all():
            raise DegeneratePolygon(f"bad vertex list of shape {v.shape}")
        if _distinct_vertices(v) < 3:
            raise DegeneratePolygon("polygon needs >= 3 distinct vertices")
        inside = np.zeros((h, w), dtype=bool)
        n = len(v)
        for i in range(n):
            x1, y1 = v[i]
            x2, y2 = v[(i + 1) % n]
            straddles = (y1 > py) != (y2 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xcross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddles & (px < xcross)
        mask |= inside
    return mask.astype(np.uint8)


def horizontal_flip(x: np.ndarray) -> np.ndarray:
    """Mirror columns: column c maps to width-1-c. Works on images and masks."""
    return x[:, ::-1].copy()


def random_crop(
    image: np.ndarray, mask: np.ndarray, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One crop of ``size`` square at an offset drawn uniformly from the
    valid range; the same offset is applied to image and mask."""
    if image.shape != mask.shape:
        raise ShapeMismatch(f"image {image.shape} vs mask {mask.shape}")
    h, w = image.shape
    if size > w or size > h:
        raise CropTooLarge(f"crop {size} exceeds input {w}x{h}")
    ox = int(rng.integers(0, w - size + 1))
    oy = int(rng.integers(0, h - size + 1))
    return (
        image[oy : oy + size, ox : ox + size].copy(),
        mask[oy : oy + size, ox : ox + size].copy(),
    )


def augment_sixfold(
    image: np.ndarray, mask: np.ndarray, cfg: AugmentConfig
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expand one ROI pair into 2*(1+crops_per_image) training pairs.

    Order at the default two crops:
    [original, crop1, crop2, flipped, flipped-crop1, flipped-crop2],
    all at final_size x final_size. Deterministic under cfg.seed.
    """
    if image.shape != mask.shape:
        raise ShapeMismatch(f"image {image.shape} vs mask {mask.shape}")
    f = cfg.final_size
    base_img = resize_image(image, f, f)
    base_mask = resize_mask(mask, f, f)
    pre_img = resize_image(image, cfg.pre_crop_size, cfg.pre_crop_size)
    pre_mask = resize_mask(mask, cfg.pre_crop_size, cfg.pre_crop_size)

    out = [(base_img, base_mask)]
    rng = np.random.default_rng(derive_seed(cfg.seed, "crops"))
    for _ in range(cfg.crops_per_image):
        out.append(random_crop(pre_img, pre_mask, f, rng))

    out.append((horizontal_flip(base_img), horizontal_flip(base_mask)))
    flip_img, flip_mask = horizontal_flip(pre_img), horizontal_flip(pre_mask)
    for _ in range(cfg.crops_per_image):
        out.append(random_crop(flip_img, flip_mask, f, rng))
    return out
