"""Command-line entry point.

Every subcommand builds one PipelineConfig from (defaults < config
file < BPSEG_* environment < flags < --set overrides), derives seeds,
runs, and writes a deterministic ``manifest.json`` into the output
directory so any artifact can be reproduced from its manifest alone.

Exit codes: 0 success, 1 runtime failure (missing files, bad data),
2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import (
    PipelineConfig,
    apply_overrides,
    env_overrides,
    load_config,
    resolve_seeds,
    write_manifest,
)
from .data_model import Arm, ConfigError, validate_sample
from .enhance import clahe, dataset_histogram
from .experiments import (
    assisted_relabel_report,
    compare_raters,
    emit_tables,
    make_arm_report,
    prepare_eval_pair,
    prepare_train_pairs,
    render_overlay,
    run_crossval,
)
from .io import load_dataset, save_rgb, write_sample
from .metrics import binarize
from .network import load_checkpoint, predict_scores, save_checkpoint
from .synthetic import attach_simulated_raters, generate_phantom_dataset
from .training import make_folds, train_fold


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--dataset-root", help="dataset directory")
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument("--arm", help="experiment arm name")
    parser.add_argument("--k", type=int, help="fold count")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--workers", type=int, help="parallel workers")
    parser.add_argument("--device-profile", help="restrict to one device's samples")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key, e.g. --set train.epochs=5",
    )


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    config_path = args.config or os.environ.get("BPSEG_CONFIG")
    cfg = load_config(config_path)
    cfg = apply_overrides(cfg, env_overrides(os.environ))
    flag_overrides = []
    for flag, key in (
        ("dataset_root", "dataset_root"),
        ("out", "out_dir"),
        ("arm", "arm"),
        ("k", "k"),
        ("seed", "seed"),
        ("workers", "workers"),
        ("device_profile", "device_profile"),
    ):
        value = getattr(args, flag)
        if value is not None:
            flag_overrides.append(f"{key}={value}")
    cfg = apply_overrides(cfg, flag_overrides)
    return apply_overrides(cfg, args.overrides)


def _load_samples(cfg: PipelineConfig):
    devices = [cfg.device_profile] if cfg.device_profile else None
    samples = load_dataset(cfg.dataset_root, devices=devices)
    if not samples:
        raise FileNotFoundError(f"no samples under {cfg.dataset_root}")
    return samples


def _plan(cfg: PipelineConfig, samples):
    return make_folds(
        [s.id for s in samples], cfg.k, cfg.seed, trim_to_divisible=cfg.trim_to_divisible
    )


def _check_geometry(cfg: PipelineConfig) -> None:
    if cfg.augment.final_size % cfg.network.stride:
        raise ConfigError(
            f"augment.final_size {cfg.augment.final_size} not divisible by the "
            f"network stride {cfg.network.stride}"
        )


def _rater_names(n: int) -> list[str]:
    return [chr(ord("a") + i) for i in range(n)]


def _cmd_synth_gen(cfg: PipelineConfig, args) -> int:
    samples = generate_phantom_dataset(cfg.phantom)
    if cfg.rater_sims:
        names = _rater_names(len(cfg.rater_sims))
        sims = dict(zip(names, cfg.rater_sims))
        samples = attach_simulated_raters(samples, sims, second_pass_factor=0.5)
    for sample in samples:
        write_sample(cfg.dataset_root, sample)
    write_manifest(
        cfg.out_dir,
        "synth-gen",
        cfg,
        {"samples": len(samples), "raters": _rater_names(len(cfg.rater_sims))},
    )
    print(f"wrote {len(samples)} phantoms under {cfg.dataset_root}")
    return 0


def _cmd_prepare(cfg: PipelineConfig, args) -> int:
    samples = _load_samples(cfg)
    violations = {s.id: v for s in samples if (v := validate_sample(s))}
    by_device: dict[str, int] = {}
    for s in samples:
        by_device[s.device.value] = by_device.get(s.device.value, 0) + 1
    summary = {
        "samples": len(samples),
        "by_device": by_device,
        "violations": violations,
    }
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_manifest(cfg.out_dir, "prepare", cfg, {"samples": len(samples)})
    if violations:
        print(f"{len(violations)} samples have invariant violations", file=sys.stderr)
        return 1
    print(f"validated {len(samples)} samples")
    return 0


def _cmd_enhance_report(cfg: PipelineConfig, args) -> int:
    samples = _load_samples(cfg)
    tag = cfg.device_profile or "all"
    originals = []
    for s in samples:
        img, _ = prepare_eval_pair(s, Arm.ORIGINAL, cfg.augment, cfg.enhance)
        originals.append(img)
    enhanced = [clahe(img, cfg.enhance) for img in originals]
    out = Path(cfg.out_dir) / "histograms"
    out.mkdir(parents=True, exist_ok=True)
    for images, suffix in ((originals, "original"), (enhanced, "enhanced")):
        report = dataset_histogram(images, f"{tag}-{suffix}")
        report.to_csv(out / f"{tag}-{suffix}.csv")
        report.to_gnuplot(out / f"{tag}-{suffix}.gnuplot")
    write_manifest(cfg.out_dir, "enhance-report", cfg, {"images": len(originals)})
    print(f"histograms for {len(originals)} images -> {out}")
    return 0


def _cmd_train(cfg: PipelineConfig, args) -> int:
    _check_geometry(cfg)
    resolved = resolve_seeds(cfg)
    samples = _load_samples(cfg)
    plan = _plan(cfg, samples)
    fold = args.fold
    if not 0 <= fold < plan.k:
        raise ConfigError(f"--fold {fold} outside [0, {plan.k})")
    by_id = {s.id: s for s in samples}
    arm = cfg.arm
    train_pairs = [
        pair
        for sid in plan.train_ids(fold)
        for pair in prepare_train_pairs(by_id[sid], arm, resolved.augment, cfg.enhance)
    ]
    val_pairs = [
        prepare_eval_pair(by_id[sid], arm, resolved.augment, cfg.enhance)
        for sid in plan.fold_ids(fold)
    ]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train_fold(
        train_pairs,
        val_pairs,
        resolved.network,
        replace(resolved.train, arm=arm),
        train_ids=plan.train_ids(fold),
        val_ids=plan.fold_ids(fold),
        log_path=out / "training_log.csv",
    )
    save_checkpoint(out / "best.bpckpt", model, resolved.network)
    write_manifest(
        cfg.out_dir,
        "train",
        cfg,
        {"fold": fold, "best_epoch": history.best_epoch, "best_iou": history.best_iou},
    )
    print(f"fold {fold}: best IoU {history.best_iou:.4f} at epoch {history.best_epoch}")
    return 0


def _cmd_crossval(cfg: PipelineConfig, args) -> int:
    _check_geometry(cfg)
    resolved = resolve_seeds(cfg)
    samples = _load_samples(cfg)
    plan = _plan(cfg, samples)
    arms = list(Arm) if args.all_arms else [cfg.arm]
    out = Path(cfg.out_dir)
    results = {}
    for arm in arms:
        report, _ = run_crossval(
            samples,
            arm,
            resolved.network,
            resolved.train,
            plan,
            aug_cfg=resolved.augment,
            enh_cfg=cfg.enhance,
            out_dir=out / "logs",
        )
        emit_tables(report, out / "reports" / "crossval" / arm.value)
        results[arm.value] = report.average
        print(f"{arm.value}: average IoU {report.average:.4f}")
    write_manifest(cfg.out_dir, "crossval", cfg, {"averages": results})
    return 0


def _read_arm_report_csv(path, arm: Arm):
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    values = []
    for line in lines[1:]:
        first, second = line.split(",")[:2]
        if first == "average":
            break
        values.append(float(second))
    return make_arm_report(arm, values)


def _cmd_compare_raters(cfg: PipelineConfig, args) -> int:
    samples = _load_samples(cfg)
    plan = _plan(cfg, samples)
    system = None
    if args.system_report:
        system = _read_arm_report_csv(args.system_report, cfg.arm)
    report = compare_raters(samples, plan, system_report=system)
    out = Path(cfg.out_dir)
    emit_tables(report, out / "reports" / "raters")
    write_manifest(
        cfg.out_dir, "compare-raters", cfg, {"averages": report.rater_averages}
    )
    for rid, avg in sorted(report.rater_averages.items()):
        print(f"rater {rid}: average IoU {avg:.4f}")
    return 0


def _cmd_assist_report(cfg: PipelineConfig, args) -> int:
    samples = _load_samples(cfg)
    plan = _plan(cfg, samples)
    report = assisted_relabel_report(
        samples,
        args.rater,
        args.fold,
        plan,
        dataset_tag=cfg.device_profile or "all",
    )
    out = Path(cfg.out_dir)
    emit_tables(report, out / "reports" / f"assist_{args.rater}_fold{args.fold}")
    write_manifest(
        cfg.out_dir,
        "assist-report",
        cfg,
        {"rater": args.rater, "fold": args.fold, "improvement": report.improvement},
    )
    print(
        f"rater {args.rater} fold {args.fold}: "
        f"{report.original_iou:.4f} -> {report.second_iou:.4f} "
        f"({report.improvement:+.2f}%)"
    )
    return 0


def _cmd_overlay(cfg: PipelineConfig, args) -> int:
    samples = _load_samples(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    wanted = set(args.ids.split(",")) if args.ids else {s.id for s in samples}
    unknown = wanted - {s.id for s in samples}
    if unknown:
        raise ConfigError(f"unknown sample ids: {sorted(unknown)[:5]}")
    out = Path(cfg.out_dir) / "overlays"
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for sample in samples:
        if sample.id not in wanted:
            continue
        image, mask = prepare_eval_pair(sample, cfg.arm, cfg.augment, cfg.enhance)
        scores = predict_scores(model, image[None])[0]
        save_rgb(out / f"{sample.id}.png", render_overlay(image, binarize(scores), mask))
        count += 1
    write_manifest(cfg.out_dir, "overlay", cfg, {"overlays": count})
    print(f"wrote {count} overlays -> {out}")
    return 0


def _cmd_folds(cfg: PipelineConfig, args) -> int:
    samples = _load_samples(cfg)
    plan = _plan(cfg, samples)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "k": plan.k,
        "seed": plan.seed,
        "assignments": dict(sorted(plan.assignments.items())),
        "dropped": list(plan.dropped),
        "sizes": plan.fold_sizes(),
    }
    (out / "folds.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_manifest(cfg.out_dir, "folds", cfg, {"sizes": plan.fold_sizes()})
    print(f"fold sizes: {plan.fold_sizes()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bpseg",
        description="Brachial-plexus-trunk segmentation experiment pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"bpseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        _common_flags(p)
        return p

    add("synth-gen", "generate a synthetic phantom dataset")
    add("prepare", "validate a dataset and write a summary")
    add("enhance-report", "emit intensity histograms before/after enhancement")
    p_train = add("train", "train one fold and save the best checkpoint")
    p_train.add_argument("--fold", type=int, default=0, help="validation fold index")
    p_cv = add("crossval", "k-fold cross-validation for one arm (or all)")
    p_cv.add_argument("--all-arms", action="store_true", help="run all four arms")
    p_cr = add("compare-raters", "aggregate rater masks against consensus per fold")
    p_cr.add_argument("--system-report", help="arm report CSV for the system row")
    p_ar = add("assist-report", "first- vs second-pass contrast for one rater/fold")
    p_ar.add_argument("--rater", required=True, help="rater id")
    p_ar.add_argument("--fold", type=int, required=True, help="fold index")
    p_ov = add("overlay", "render prediction/truth overlays from a checkpoint")
    p_ov.add_argument("--checkpoint", required=True, help="checkpoint file")
    p_ov.add_argument("--ids", help="comma-separated sample ids (default: all)")
    add("folds", "write the deterministic fold assignment")
    return parser


_HANDLERS = {
    "synth-gen": _cmd_synth_gen,
    "prepare": _cmd_prepare,
    "enhance-report": _cmd_enhance_report,
    "train": _cmd_train,
    "crossval": _cmd_crossval,
    "compare-raters": _cmd_compare_raters,
    "assist-report": _cmd_assist_report,
    "overlay": _cmd_overlay,
    "folds": _cmd_folds,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        return _HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map every failure to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
