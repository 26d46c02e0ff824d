"""Shared domain types and their invariants.

Images, masks and score maps are plain 2-D numpy arrays indexed
``arr[y, x]`` (row-major):

* gray image  -- dtype uint8, intensities 0..255
* binary mask -- dtype uint8, values {0, 1} (1 = nerve trunk)
* score map   -- dtype float, finite per-pixel logits

The constructors below normalise and freeze arrays; ``validate_*``
report violations as data instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ShapeMismatch(ValueError):
    """Two grids that must share dimensions do not."""


class EmptyInput(ValueError):
    """An operation that needs at least one element got none."""


class ConfigError(ValueError):
    """A configuration violates its invariants."""


class Device(str, Enum):
    """Ultrasound device (or interface) a sample was captured on."""

    YGY = "YGY"
    BK3000_IF1 = "BK3000_IF1"
    BK3000_IF2 = "BK3000_IF2"
    SYNTHETIC = "SYNTHETIC"


class Arm(str, Enum):
    """The four experiment arms: which of the two optimisations are on."""

    ORIGINAL = "original"
    MODIFIED_LOSS = "modified_loss"
    ENHANCED = "enhanced"
    MIXED_OPTIMIZATION = "mixed_optimization"

    @property
    def use_clahe(self) -> bool:
        return self in (Arm.ENHANCED, Arm.MIXED_OPTIMIZATION)

    @property
    def use_lovasz(self) -> bool:
        return self in (Arm.MODIFIED_LOSS, Arm.MIXED_OPTIMIZATION)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def as_gray_image(arr) -> np.ndarray:
    """Return a read-only uint8 (H, W) image, checking range and shape."""
    a = np.asarray(arr)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"gray image must be non-empty 2-D, got shape {a.shape}")
    if a.dtype != np.uint8:
        if not np.issubdtype(a.dtype, np.integer):
            raise ValueError(f"gray image must be integer-typed, got {a.dtype}")
        if a.min() < 0 or a.max() > 255:
            raise ValueError("gray image intensities must lie in [0, 255]")
        a = a.astype(np.uint8)
    return _frozen(a.copy())


def as_binary_mask(arr) -> np.ndarray:
    """Return a read-only uint8 (H, W) mask with values in {0, 1}."""
    a = np.asarray(arr)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"mask must be non-empty 2-D, got shape {a.shape}")
    vals = np.unique(a)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask values must be in {{0, 1}}, got {vals[:8]}")
    return _frozen(a.astype(np.uint8))


def as_score_map(arr) -> np.ndarray:
    """Return a read-only float64 (H, W) score map, all values finite."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"score map must be non-empty 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("score map contains non-finite values")
    return _frozen(a.copy())


@dataclass(frozen=True)
class AnnotatedSample:
    """One image with its consensus label and optional per-rater labels.

    ``rater_masks`` holds each rater's independent first-pass label;
    ``second_pass_masks`` the relabeling done after seeing system output.
    All masks must share the image's dimensions.
    """

    id: str
    device: Device
    image: np.ndarray
    consensus: np.ndarray
    rater_masks: dict[str, np.ndarray] = field(default_factory=dict)
    second_pass_masks: dict[str, np.ndarray] = field(default_factory=dict)


def _check_mask(name: str, mask, image_shape, out: list[str]) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        out.append(f"{name}: not a 2-D grid (shape {m.shape})")
        return
    if m.shape != image_shape:
        out.append(f"{name}: dimension mismatch {m.shape} vs image {image_shape}")
    if m.size and not np.isin(np.unique(m), (0, 1)).all():
        out.append(f"{name}: non-binary label")


def validate_sample(sample: AnnotatedSample) -> list[str]:
    """Check every type invariant; returns a list of violations (empty = ok).

    Total by design: violations come back as descriptions, never exceptions.
    """
    out: list[str] = []
    img = np.asarray(sample.image)
    if not sample.id:
        out.append("id: empty")
    if img.ndim != 2 or img.size == 0:
        out.append(f"image: not a non-empty 2-D grid (shape {img.shape})")
        return out
    if img.size and (img.min() < 0 or img.max() > 255):
        out.append("image: intensity outside [0, 255]")
    _check_mask("consensus", sample.consensus, img.shape, out)
    for rid, m in sample.rater_masks.items():
        _check_mask(f"rater {rid}", m, img.shape, out)
    for rid, m in sample.second_pass_masks.items():
        _check_mask(f"second pass {rid}", m, img.shape, out)
    return out


@dataclass(frozen=True)
class FoldPlan:
    """A seeded, disjoint partition of sample ids into k test folds.

    Reconstructible from (ids, k, seed): building a plan twice from the
    same inputs yields identical assignments. ``dropped`` records ids
    randomly removed to make the count divisible by k.
    """

    k: int
    seed: int
    assignments: dict[str, int]
    dropped: tuple[str, ...] = ()

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f != fold)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignments.values():
            sizes[f] += 1
        return sizes


def derive_seed(base: int, *tokens) -> int:
    """Derive a stable per-task seed from a base seed and context tokens.

    Hash-based so parallel workers (per sample, per fold) get independent
    streams that do not depend on execution order.
    """
    import hashlib

    text = ":".join([str(int(base))] + [str(t) for t in tokens])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
