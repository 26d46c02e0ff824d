"""Ultrasound-like phantom datasets and simulated raters.

Each phantom is multiplicative Rayleigh speckle over a dark background
with hypoechoic (darker-than-background) elliptical trunks wrapped in a
bright rim — the texture the real scans show, not their physics. The
consensus mask is the exact union of ellipse interiors evaluated with
the analytic membership test at integer pixel coordinates, so tests can
recompute it independently from the ellipse parameters.

Simulated raters perturb the consensus in three composable ways:
uniform dilation/erosion, smoothed boundary jitter, and whole-component
drops — a crude but controllable stand-in for inter-rater disagreement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data_model import AnnotatedSample, ConfigError, Device, derive_seed


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned ellipse; a pixel (x, y) is interior when
    ((x-cx)/rx)**2 + ((y-cy)/ry)**2 <= 1."""

    cx: float
    cy: float
    rx: float
    ry: float

    def normalized_distance(self, width: int, height: int) -> np.ndarray:
        """Grid of ((x-cx)/rx)**2 + ((y-cy)/ry)**2; interior is <= 1."""
        x = np.arange(width, dtype=np.float64)
        y = np.arange(height, dtype=np.float64)
        ex = ((x - self.cx) / self.rx) ** 2
        ey = ((y - self.cy) / self.ry) ** 2
        return ey[:, None] + ex[None, :]


@dataclass(frozen=True)
class PhantomConfig:
    count: int = 100
    frame_width: int = 700
    frame_height: int = 600
    trunks_min: int = 1
    trunks_max: int = 3
    trunk_radius_min: float = 8.0
    trunk_radius_max: float = 24.0
    speckle_scale: float = 0.4
    background_level: float = 40.0
    trunk_darkness: float = 0.45
    rim_brightness: float = 110.0
    rim_extent: float = 1.35
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.frame_width < 1 or self.frame_height < 1:
            raise ConfigError("frame dims must be positive")
        if not 0 <= self.trunks_min <= self.trunks_max:
            raise ConfigError("need 0 <= trunks_min <= trunks_max")
        if not 0 < self.trunk_radius_min <= self.trunk_radius_max:
            raise ConfigError("radius range must be positive and ordered")
        if not 0 <= self.background_level <= 255:
            raise ConfigError("background_level must be in [0, 255]")
        if not 0 <= self.trunk_darkness <= 1:
            raise ConfigError("trunk_darkness must be in [0, 1]")
        if self.rim_extent <= 1:
            raise ConfigError("rim_extent must exceed 1")


@dataclass(frozen=True)
class RaterSimConfig:
    dilate_or_erode: int = 0
    boundary_jitter_sd: float = 0.0
    drop_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.drop_probability <= 1:
            raise ConfigError("drop_probability must be in [0, 1]")


def _sample_ellipses(cfg: PhantomConfig, rng: np.random.Generator) -> list[Ellipse]:
    """Draw non-overlapping trunk ellipses that fit inside the frame."""
    count = int(rng.integers(cfg.trunks_min, cfg.trunks_max + 1))
    ellipses: list[Ellipse] = []
    for _ in range(count):
        for _attempt in range(50):
            rx = float(rng.uniform(cfg.trunk_radius_min, cfg.trunk_radius_max))
            ry = float(rng.uniform(cfg.trunk_radius_min, cfg.trunk_radius_max))
            margin_x, margin_y = cfg.rim_extent * rx + 2, cfg.rim_extent * ry + 2
            if 2 * margin_x >= cfg.frame_width or 2 * margin_y >= cfg.frame_height:
                continue
            cx = float(rng.uniform(margin_x, cfg.frame_width - margin_x))
            cy = float(rng.uniform(margin_y, cfg.frame_height - margin_y))
            reach = cfg.rim_extent * max(rx, ry)
            if all(
                np.hypot(cx - e.cx, cy - e.cy) > reach + cfg.rim_extent * max(e.rx, e.ry) + 2
                for e in ellipses
            ):
                ellipses.append(Ellipse(cx, cy, rx, ry))
                break
    return ellipses


def phantom_frame(cfg: PhantomConfig, seed: int) -> tuple[np.ndarray, np.ndarray, list[Ellipse]]:
    """Render one phantom: (image uint8, consensus mask, ellipses)."""
    rng = np.random.default_rng(seed)
    ellipses = _sample_ellipses(cfg, rng)

    reflect = np.full((cfg.frame_height, cfg.frame_width), cfg.background_level, dtype=np.float64)
    mask = np.zeros((cfg.frame_height, cfg.frame_width), dtype=np.uint8)
    for e in ellipses:
        dist = e.normalized_distance(cfg.frame_width, cfg.frame_height)
        reflect[(dist > 1.0) & (dist <= cfg.rim_extent**2)] = cfg.rim_brightness
        reflect[dist <= 1.0] = cfg.background_level * cfg.trunk_darkness
        mask[dist <= 1.0] = 1

    # Rayleigh with scale sqrt(2/pi) has unit mean, so speckle_scale
    # controls contrast without shifting mean brightness.
    raw = rng.rayleigh(scale=np.sqrt(2.0 / np.pi), size=reflect.shape)
    smooth = ndimage.gaussian_filter(raw, sigma=1.0)
    field = np.clip(1.0 + cfg.speckle_scale * (smooth - 1.0), 0.0, None)
    image = np.clip(np.floor(reflect * field + 0.5), 0, 255).astype(np.uint8)
    return image, mask, ellipses


def generate_phantom_dataset(
    cfg: PhantomConfig, out_root=None
) -> list[AnnotatedSample]:
    """Generate cfg.count phantoms (optionally writing the dataset
    layout under out_root); deterministic in cfg.seed."""
    from . import io  # local import: io pulls in PIL, only needed when writing

    samples = []
    for i in range(cfg.count):
        image, mask, _ = phantom_frame(cfg, derive_seed(cfg.seed, "phantom", i))
        samples.append(
            AnnotatedSample(
                id=f"syn_{i:04d}",
                device=Device.SYNTHETIC,
                image=image,
                consensus=mask,
            )
        )
    if out_root is not None:
        for sample in samples:
            io.write_sample(out_root, sample)
    return samples


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    return (span[:, None] ** 2 + span[None, :] ** 2) <= radius**2


def simulate_rater(consensus: np.ndarray, cfg: RaterSimConfig) -> np.ndarray:
    """Perturb a consensus mask: dilate/erode, jitter the boundary via a
    smoothed displacement field, then drop whole components."""
    mask = np.asarray(consensus, dtype=bool)
    rng = np.random.default_rng(cfg.seed)

    if cfg.dilate_or_erode > 0:
        mask = ndimage.binary_dilation(mask, structure=_disk(cfg.dilate_or_erode))
    elif cfg.dilate_or_erode < 0:
        mask = ndimage.binary_erosion(mask, structure=_disk(-cfg.dilate_or_erode))

    if cfg.boundary_jitter_sd > 0:
        h, w = mask.shape
        dy = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=4.0)
        dx = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=4.0)
        for d in (dy, dx):
            sd = d.std()
            if sd > 0:
                d *= cfg.boundary_jitter_sd / sd
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = np.stack([yy + dy, xx + dx])
        mask = ndimage.map_coordinates(mask.astype(np.uint8), coords, order=0, mode="nearest").astype(bool)

    if cfg.drop_probability > 0:
        labels, n = ndimage.label(mask)
        keep = np.ones(n + 1, dtype=bool)
        for comp in range(1, n + 1):
            if rng.random() < cfg.drop_probability:
                keep[comp] = False
        mask = keep[labels] & mask

    return mask.astype(np.uint8)


def _scaled(cfg: RaterSimConfig, factor: float) -> RaterSimConfig:
    return replace(
        cfg,
        dilate_or_erode=int(round(cfg.dilate_or_erode * factor)),
        boundary_jitter_sd=cfg.boundary_jitter_sd * factor,
        drop_probability=cfg.drop_probability * factor,
    )


def attach_simulated_raters(
    samples: list[AnnotatedSample],
    rater_cfgs: dict[str, RaterSimConfig],
    second_pass_factor: float | None = None,
) -> list[AnnotatedSample]:
    """Return samples with rater_masks filled by simulation; each
    (sample, rater) pair gets its own derived seed.

    With second_pass_factor set, second_pass_masks are also filled
    using each rater's perturbation scaled by that factor — a factor
    below 1 models raters landing closer to consensus on relabeling.
    """
    out = []
    for sample in samples:
        masks = {
            rid: simulate_rater(
                sample.consensus, replace(rcfg, seed=derive_seed(rcfg.seed, sample.id, rid))
            )
            for rid, rcfg in rater_cfgs.items()
        }
        seconds = {}
        if second_pass_factor is not None:
            seconds = {
                rid: simulate_rater(
                    sample.consensus,
                    replace(
                        _scaled(rcfg, second_pass_factor),
                        seed=derive_seed(rcfg.seed, sample.id, rid, "second"),
                    ),
                )
                for rid, rcfg in rater_cfgs.items()
            }
        out.append(replace(sample, rater_masks=masks, second_pass_masks=seconds))
    return out
