"""IoU accumulation, dispersion statistics, and improvement percentages.

Fold-level IoU is the aggregate ratio (sum of intersections over sum of
unions across the fold's images), accumulated here; per-image means are
reported alongside for transparency but never drive checkpointing or
tables. Dispersion deliberately reports population variance, sample
variance, and mean absolute deviation side by side — callers pick, the
table writers print all three.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import EmptyInput, ShapeMismatch


class NonPositiveBaseline(ValueError):
    """improvement_percent needs a strictly positive 'before' value."""


@dataclass(frozen=True)
class IoUAccumulator:
    """Running sums of mask intersection and union pixel counts."""

    intersection_sum: int = 0
    union_sum: int = 0

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        return IoUAccumulator(
            self.intersection_sum + other.intersection_sum,
            self.union_sum + other.union_sum,
        )


@dataclass(frozen=True)
class DispersionStats:
    mean: float
    population_variance: float
    sample_variance: float
    mean_abs_deviation: float


def binarize(scores, threshold: float = 0.0) -> np.ndarray:
    """Threshold logits to a {0,1} mask; ties at the threshold go to
    foreground (logit 0 is probability 0.5)."""
    s = np.asarray(scores, dtype=np.float64)
    return (s >= threshold).astype(np.uint8)


def iou_accumulate(acc: IoUAccumulator, pred, truth) -> IoUAccumulator:
    """Fold one predicted/truth mask pair into the accumulator."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs truth {t.shape}")
    return IoUAccumulator(
        acc.intersection_sum + int((p & t).sum()),
        acc.union_sum + int((p | t).sum()),
    )


def iou_value(acc: IoUAccumulator) -> float:
    """Aggregate IoU; an empty union (nothing predicted, nothing true)
    counts as vacuously perfect agreement."""
    if acc.union_sum == 0:
        return 1.0
    return acc.intersection_sum / acc.union_sum


def mask_iou(pred, truth) -> float:
    """IoU of a single mask pair."""
    return iou_value(iou_accumulate(IoUAccumulator(), pred, truth))


def dispersion(values) -> DispersionStats:
    """Mean plus three dispersion measures over a list of reals.

    Sample variance uses the n-1 denominator and is defined as 0 for a
    single value.
    """
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("dispersion of an empty list")
    mean = float(v.mean())
    pop = float(((v - mean) ** 2).mean())
    sample = float(((v - mean) ** 2).sum() / (v.size - 1)) if v.size > 1 else 0.0
    mad = float(np.abs(v - mean).mean())
    return DispersionStats(mean, pop, sample, mad)


def improvement_percent(before: float, after: float) -> float:
    """Relative change from before to after, in percent."""
    if before <= 0:
        raise NonPositiveBaseline(f"baseline must be > 0, got {before}")
    return 100.0 * (after - before) / before
