"""Experiment orchestration: arm-consistent preparation, k-fold
cross-validation per arm, rater comparison, assisted-relabel contrast,
overlays, and table emission.

Arms differ in exactly two switches: whether inputs are
contrast-enhanced and whether the Lovász term joins the loss.
Preparation owns the first switch (training additionally gets the
six-fold augmentation); the training config's arm carries the second.
Enhancement always runs on the network-input image, i.e. after the
resize (and after augmentation crops), identically at train and eval
time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import singledispatch
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data_model import AnnotatedSample, Arm, ConfigError, ShapeMismatch, FoldPlan, derive_seed
from .enhance import EnhanceConfig, clahe
from .metrics import (
    DispersionStats,
    IoUAccumulator,
    dispersion,
    improvement_percent,
    iou_accumulate,
    iou_value,
)
from .network import NetworkConfig
from .preprocess import (
    AugmentConfig,
    augment_sixfold,
    crop_roi,
    profile_for,
    resize_image,
    resize_mask,
)
from .training import TrainConfig, TrainHistory, train_fold


class MissingRaterMask(KeyError):
    """A sample lacks a mask for the requested rater."""


@dataclass(frozen=True)
class ArmReport:
    arm: Arm
    per_fold_iou: tuple[float, ...]
    average: float
    dispersion: DispersionStats


@dataclass(frozen=True)
class RaterReport:
    """Per-rater fold IoUs vs consensus, plus an optional system row."""

    k: int
    raters: dict[str, tuple[float, ...]]
    rater_averages: dict[str, float]
    system: tuple[float, ...] | None
    system_average: float | None
    dispersions: dict[str, DispersionStats]


@dataclass(frozen=True)
class ContrastReport:
    dataset_tag: str
    fold_index: int
    rater_id: str
    original_iou: float
    second_iou: float
    improvement: float


def make_arm_report(arm: Arm, per_fold_iou) -> ArmReport:
    folds = tuple(float(v) for v in per_fold_iou)
    stats = dispersion(folds)
    return ArmReport(arm=arm, per_fold_iou=folds, average=stats.mean, dispersion=stats)


def prepare_eval_pair(
    sample: AnnotatedSample, arm: Arm, aug_cfg: AugmentConfig, enh_cfg: EnhanceConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-side preparation: ROI crop, resize to the network
    input size, enhancement when the arm asks — no augmentation."""
    profile = profile_for(sample.device, sample.image.shape)
    image = resize_image(crop_roi(sample.image, profile), aug_cfg.final_size, aug_cfg.final_size)
    mask = resize_mask(crop_roi(sample.consensus, profile), aug_cfg.final_size, aug_cfg.final_size)
    if arm.use_clahe:
        image = clahe(image, enh_cfg)
    return image, mask


def prepare_train_pairs(
    sample: AnnotatedSample, arm: Arm, aug_cfg: AugmentConfig, enh_cfg: EnhanceConfig
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Training-side preparation: ROI crop, resize to the pre-crop
    size, six-fold augmentation (seeded per sample), then enhancement
    of each augmented image when the arm asks."""
    profile = profile_for(sample.device, sample.image.shape)
    image = resize_image(crop_roi(sample.image, profile), aug_cfg.pre_crop_size, aug_cfg.pre_crop_size)
    mask = resize_mask(crop_roi(sample.consensus, profile), aug_cfg.pre_crop_size, aug_cfg.pre_crop_size)
    per_sample = replace(aug_cfg, seed=derive_seed(aug_cfg.seed, "augment", sample.id))
    pairs = augment_sixfold(image, mask, per_sample)
    if arm.use_clahe:
        pairs = [(clahe(img, enh_cfg), m) for img, m in pairs]
    return pairs


def run_crossval(
    samples: list[AnnotatedSample],
    arm: Arm,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    fold_plan: FoldPlan,
    aug_cfg: AugmentConfig = AugmentConfig(),
    enh_cfg: EnhanceConfig = EnhanceConfig(),
    out_dir=None,
) -> tuple[ArmReport, list[TrainHistory]]:
    """Train/evaluate each fold of the plan for one arm.

    Fold f's score is the best validation IoU reached while training on
    the other k-1 folds and validating on fold f each epoch (the fold
    doubles as the validation set, so the checkpointed best is the fold
    score). Per-fold seeds are derived so folds are independent and
    parallelizable without sharing RNG state.
    """
    by_id = {s.id: s for s in samples}
    missing = [i for i in fold_plan.assignments if i not in by_id]
    if missing:
        raise ConfigError(f"fold plan references unknown ids: {missing[:5]}")

    per_fold: list[float] = []
    histories: list[TrainHistory] = []
    for fold in range(fold_plan.k):
        train_ids = fold_plan.train_ids(fold)
        val_ids = fold_plan.fold_ids(fold)
        train_pairs = [
            pair
            for sid in train_ids
            for pair in prepare_train_pairs(by_id[sid], arm, aug_cfg, enh_cfg)
        ]
        val_pairs = [prepare_eval_pair(by_id[sid], arm, aug_cfg, enh_cfg) for sid in val_ids]
        fold_train_cfg = replace(
            train_cfg, arm=arm, seed=derive_seed(train_cfg.seed, "train", fold)
        )
        fold_net_cfg = replace(net_cfg, seed=derive_seed(net_cfg.seed, "net", fold))
        log_path = None
        if out_dir is not None:
            fold_dir = Path(out_dir)
            fold_dir.mkdir(parents=True, exist_ok=True)
            log_path = fold_dir / f"{arm.value}_fold{fold}.csv"
        _, history = train_fold(
            train_pairs,
            val_pairs,
            fold_net_cfg,
            fold_train_cfg,
            train_ids=train_ids,
            val_ids=val_ids,
            log_path=log_path,
        )
        per_fold.append(history.best_iou)
        histories.append(history)
    return make_arm_report(arm, per_fold), histories


def _fold_mask_iou(
    samples_by_id: dict[str, AnnotatedSample], ids, rater_id: str, second: bool = False
) -> float:
    acc = IoUAccumulator()
    for sid in ids:
        sample = samples_by_id[sid]
        source = sample.second_pass_masks if second else sample.rater_masks
        if rater_id not in source:
            pass_name = "second-pass" if second else "first-pass"
            raise MissingRaterMask(f"sample {sid} has no {pass_name} mask for rater {rater_id}")
        acc = iou_accumulate(acc, source[rater_id], sample.consensus)
    return iou_value(acc)


def compare_raters(
    samples: list[AnnotatedSample],
    fold_plan: FoldPlan,
    system_report: ArmReport | None = None,
) -> RaterReport:
    """Aggregate each rater's masks against consensus per fold.

    Pure mask arithmetic — no model is built or evaluated. The system
    row, when provided, is copied from a completed cross-validation
    report so doctors and system are compared on the same fold plan.
    """
    if not samples:
        raise ConfigError("no samples")
    rater_ids = sorted(samples[0].rater_masks)
    if not rater_ids:
        raise MissingRaterMask("samples carry no rater masks")
    by_id = {s.id: s for s in samples}

    raters: dict[str, tuple[float, ...]] = {}
    for rid in rater_ids:
        raters[rid] = tuple(
            _fold_mask_iou(by_id, fold_plan.fold_ids(fold), rid)
            for fold in range(fold_plan.k)
        )
    rater_averages = {rid: dispersion(vals).mean for rid, vals in raters.items()}
    dispersions = {rid: dispersion(vals) for rid, vals in raters.items()}

    system = system_average = None
    if system_report is not None:
        if len(system_report.per_fold_iou) != fold_plan.k:
            raise ConfigError("system report fold count does not match the plan")
        system = system_report.per_fold_iou
        system_average = system_report.average
        dispersions["system"] = system_report.dispersion

    return RaterReport(
        k=fold_plan.k,
        raters=raters,
        rater_averages=rater_averages,
        system=system,
        system_average=system_average,
        dispersions=dispersions,
    )


def assisted_relabel_report(
    samples: list[AnnotatedSample],
    rater_id: str,
    fold_index: int,
    fold_plan: FoldPlan,
    dataset_tag: str = "",
) -> ContrastReport:
    """First-pass vs second-pass aggregate IoU for one rater on one
    fold, with the relative improvement."""
    if not 0 <= fold_index < fold_plan.k:
        raise ConfigError(f"fold {fold_index} outside [0, {fold_plan.k})")
    by_id = {s.id: s for s in samples}
    ids = fold_plan.fold_ids(fold_index)
    original = _fold_mask_iou(by_id, ids, rater_id)
    second = _fold_mask_iou(by_id, ids, rater_id, second=True)
    return ContrastReport(
        dataset_tag=dataset_tag,
        fold_index=fold_index,
        rater_id=rater_id,
        original_iou=original,
        second_iou=second,
        improvement=improvement_percent(original, second),
    )


_PRED_COLOR = np.array([220, 40, 40], dtype=np.float64)
_TRUTH_COLOR = np.array([40, 220, 60], dtype=np.uint8)
_PRED_ALPHA = 0.4


def render_overlay(image: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Grayscale base with the prediction region alpha-blended and the
    truth boundary traced; fixed palette, integer-deterministic."""
    img = np.asarray(image, dtype=np.uint8)
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if img.shape != p.shape or img.shape != t.shape:
        raise ShapeMismatch(f"image {img.shape}, pred {p.shape}, truth {t.shape}")

    out = np.repeat(img[:, :, None], 3, axis=2).astype(np.float64)
    blended = (1.0 - _PRED_ALPHA) * out[p] + _PRED_ALPHA * _PRED_COLOR
    out[p] = blended
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)

    interior = ndimage.binary_erosion(t, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    out[t & ~interior] = _TRUTH_COLOR
    return out


def _fmt(x: float) -> str:
    return f"{x:.4f}"


@singledispatch
def emit_tables(report, out_stem) -> list[Path]:
    """Write a report as <out_stem>.csv and <out_stem>.md."""
    raise TypeError(f"no table renderer for {type(report).__name__}")


def _write(out_stem, csv_lines: list[str], md_lines: list[str]) -> list[Path]:
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_stem.with_suffix(".csv")
    md_path = out_stem.with_suffix(".md")
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    md_path.write_text("\n".join(md_lines) + "\n", encoding="utf-8")
    return [csv_path, md_path]


@emit_tables.register
def _(report: ArmReport, out_stem) -> list[Path]:
    d = report.dispersion
    csv_lines = ["fold,iou,population_variance,sample_variance,mean_abs_deviation"]
    csv_lines += [f"{i + 1},{_fmt(v)},,," for i, v in enumerate(report.per_fold_iou)]
    csv_lines.append(
        f"average,{_fmt(report.average)},{_fmt(d.population_variance)},"
        f"{_fmt(d.sample_variance)},{_fmt(d.mean_abs_deviation)}"
    )
    md_lines = [
        f"# Cross-validation: {report.arm.value}",
        "",
        "| fold | IoU |",
        "| --- | --- |",
    ]
    md_lines += [f"| {i + 1} | {_fmt(v)} |" for i, v in enumerate(report.per_fold_iou)]
    md_lines += [
        f"| average | {_fmt(report.average)} |",
        "",
        f"Dispersion of fold IoUs: population variance {_fmt(d.population_variance)}, "
        f"sample variance {_fmt(d.sample_variance)}, "
        f"mean absolute deviation {_fmt(d.mean_abs_deviation)}.",
    ]
    return _write(out_stem, csv_lines, md_lines)


@emit_tables.register
def _(report: RaterReport, out_stem) -> list[Path]:
    columns = sorted(report.raters)
    headers = columns + (["system"] if report.system is not None else [])
    values = {**report.raters}
    averages = {**report.rater_averages}
    if report.system is not None:
        values["system"] = report.system
        averages["system"] = report.system_average

    csv_lines = ["fold," + ",".join(headers)]
    for fold in range(report.k):
        csv_lines.append(f"{fold + 1}," + ",".join(_fmt(values[h][fold]) for h in headers))
    csv_lines.append("average," + ",".join(_fmt(averages[h]) for h in headers))
    for stat in ("population_variance", "sample_variance", "mean_abs_deviation"):
        csv_lines.append(
            f"{stat}," + ",".join(_fmt(getattr(report.dispersions[h], stat)) for h in headers)
        )

    md_lines = ["# Rater agreement vs consensus", "", "| fold | " + " | ".join(headers) + " |"]
    md_lines.append("| --- |" + " --- |" * len(headers))
    for fold in range(report.k):
        md_lines.append(
            f"| {fold + 1} | " + " | ".join(_fmt(values[h][fold]) for h in headers) + " |"
        )
    md_lines.append("| average | " + " | ".join(_fmt(averages[h]) for h in headers) + " |")
    for stat in ("population_variance", "sample_variance", "mean_abs_deviation"):
        md_lines.append(
            f"| {stat} | "
            + " | ".join(_fmt(getattr(report.dispersions[h], stat)) for h in headers)
            + " |"
        )
    return _write(out_stem, csv_lines, md_lines)


@emit_tables.register
def _(report: ContrastReport, out_stem) -> list[Path]:
    csv_lines = [
        "dataset,fold,rater,first_pass_iou,second_pass_iou,improvement_percent",
        f"{report.dataset_tag},{report.fold_index},{report.rater_id},"
        f"{_fmt(report.original_iou)},{_fmt(report.second_iou)},{report.improvement:.2f}",
    ]
    md_lines = [
        "# Relabeling contrast",
        "",
        "| dataset | fold | rater | first-pass IoU | second-pass IoU | improvement |",
        "| --- | --- | --- | --- | --- | --- |",
        f"| {report.dataset_tag} | {report.fold_index} | {report.rater_id} "
        f"| {_fmt(report.original_iou)} | {_fmt(report.second_iou)} "
        f"| {report.improvement:.2f}% |",
    ]
    return _write(out_stem, csv_lines, md_lines)
