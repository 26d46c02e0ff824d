"""Fold construction, SGD with per-iteration LR decay, and best-IoU
checkpoint retention.

The optimizer is deliberately explicit: `sgd_step` is a pure function
over named parameter/gradient collections (numpy arrays or torch
tensors alike), and the epoch loop calls it rather than a torch
optimizer so the update rule under test is the update rule in use.
Losses are computed by the numpy implementations in `losses` and enter
torch through a custom autograd function that replays their analytic
gradient, so training consumes exactly the audited derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data_model import Arm, ConfigError, EmptyInput, FoldPlan, ShapeMismatch, derive_seed
from .losses import LossConfig, combined_loss
from .metrics import IoUAccumulator, binarize, iou_accumulate, iou_value
from .network import AttentionUNet, NetworkConfig, build_model, predict_scores


class TooFewSamples(ValueError):
    """Fewer ids than folds requested."""


class NonFiniteGradient(RuntimeError):
    """A gradient contained NaN/inf — the step would corrupt the model."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; defaults are desk-scale."""

    batch_size: int = 4
    lr_initial: float = 0.01
    lr_decrement: float = 1e-5
    lr_floor: float = 1e-5
    momentum: float = 0.0
    epochs: int = 60
    seed: int = 0
    arm: Arm = Arm.ORIGINAL
    schedule: str = "linear"
    poly_total_iters: int = 10_000
    poly_power: float = 0.9
    stop_at_iou: float | None = None
    allow_overlap: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_initial <= 0:
            raise ConfigError("lr_initial must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.schedule not in ("linear", "poly"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    lr: float


@dataclass(frozen=True)
class TrainHistory:
    records: tuple[EpochRecord, ...]
    best_epoch: int
    best_iou: float

    def to_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_iou,lr"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_iou!r},{r.lr!r}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def make_folds(ids: Sequence[str], k: int, seed: int, trim_to_divisible: bool = False) -> FoldPlan:
    """Seeded shuffle + round-robin assignment into k near-equal folds.

    Ids are sorted before shuffling so the plan depends only on the id
    set, not its iteration order. With trim_to_divisible, len(ids) mod k
    randomly chosen ids are dropped first and recorded in the plan.
    """
    id_list = sorted(str(i) for i in ids)
    if len(set(id_list)) != len(id_list):
        raise ConfigError("duplicate sample ids")
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if len(id_list) < k:
        raise TooFewSamples(f"{len(id_list)} ids for k={k}")

    rng = np.random.default_rng(seed)
    dropped: tuple[str, ...] = ()
    if trim_to_divisible and len(id_list) % k:
        drop_idx = rng.choice(len(id_list), size=len(id_list) % k, replace=False)
        dropped = tuple(sorted(id_list[i] for i in drop_idx))
        id_list = [s for s in id_list if s not in set(dropped)]

    perm = rng.permutation(len(id_list))
    assignments = {id_list[p]: i % k for i, p in enumerate(perm)}
    return FoldPlan(k=k, seed=seed, assignments=assignments, dropped=dropped)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Learning rate in effect at a 0-based optimizer iteration."""
    if iteration < 0:
        raise ConfigError("iteration must be >= 0")
    if cfg.schedule == "linear":
        return max(cfg.lr_floor, cfg.lr_initial - iteration * cfg.lr_decrement)
    frac = 1.0 - min(iteration, cfg.poly_total_iters) / cfg.poly_total_iters
    return max(cfg.lr_floor, cfg.lr_initial * frac**cfg.poly_power)


def _all_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(np.asarray(x)).all())


def sgd_step(params, grads, lr: float, momentum: float, velocity):
    """One SGD-with-momentum update: v <- momentum*v + g, w <- w - lr*v.

    Pure over mappings name -> array (numpy or torch); returns the
    updated (params, velocity) without mutating the inputs.
    """
    if set(params) != set(grads) or set(params) != set(velocity):
        raise ShapeMismatch("params, grads, and velocity must share keys")
    new_params, new_velocity = {}, {}
    for name, w in params.items():
        g, v = grads[name], velocity[name]
        if tuple(w.shape) != tuple(g.shape) or tuple(w.shape) != tuple(v.shape):
            raise ShapeMismatch(f"{name}: shapes {w.shape}/{g.shape}/{v.shape}")
        if not _all_finite(g):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        v_next = momentum * v + g
        new_params[name] = w - lr * v_next
        new_velocity[name] = v_next
    return new_params, new_velocity


class _NumpyLoss(torch.autograd.Function):
    """Bridges the numpy loss into torch: forward evaluates
    combined_loss, backward replays its analytic gradient."""

    @staticmethod
    def forward(ctx, scores: torch.Tensor, truth: np.ndarray, cfg: LossConfig):
        value, grad = combined_loss(scores.detach().cpu().numpy(), truth, cfg)
        ctx.grad = torch.from_numpy(np.ascontiguousarray(grad)).to(scores.dtype)
        return scores.new_tensor(value)

    @staticmethod
    def backward(ctx, grad_output):
        return ctx.grad * grad_output, None, None


def loss_for_batch(scores: torch.Tensor, truth: np.ndarray, cfg: LossConfig) -> torch.Tensor:
    """Scalar training loss for (B,1,H,W) logits against (B,H,W) truth."""
    return _NumpyLoss.apply(scores.squeeze(1), truth, cfg)


def evaluate_iou(model: AttentionUNet, images: np.ndarray, masks: np.ndarray) -> float:
    """Aggregate IoU of thresholded logits over an evaluation set."""
    scores = predict_scores(model, images)
    acc = IoUAccumulator()
    for score, mask in zip(scores, masks):
        acc = iou_accumulate(acc, binarize(score), mask)
    return iou_value(acc)


def train_fold(
    train_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    val_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    train_ids: Sequence[str] | None = None,
    val_ids: Sequence[str] | None = None,
    log_path=None,
) -> tuple[AttentionUNet, TrainHistory]:
    """Train on (image, mask) pairs, validating each epoch; returns the
    model restored to its best-validation-IoU parameters.

    Inputs must already be arm-consistent: enhancement applied to both
    sides when the arm calls for it, augmentation to the train side
    only. Loss terms follow train_cfg.arm. With stop_at_iou set, the
    loop ends early once validation IoU reaches it (the checkpoint of
    the best epoch is returned either way).
    """
    if not len(train_pairs) or not len(val_pairs):
        raise EmptyInput("train and val sets must be nonempty")
    if train_ids is not None and val_ids is not None and not train_cfg.allow_overlap:
        if set(train_ids) & set(val_ids):
            raise ConfigError("train and val ids overlap")

    train_images = np.stack([p[0] for p in train_pairs]).astype(np.float32) / 255.0
    train_masks = np.stack([p[1] for p in train_pairs]).astype(np.float64)
    val_images = np.stack([p[0] for p in val_pairs])
    val_masks = np.stack([p[1] for p in val_pairs])

    loss_cfg = LossConfig(use_lovasz=train_cfg.arm.use_lovasz)
    model = build_model(net_cfg)
    params = dict(model.named_parameters())
    velocity = {k: torch.zeros_like(v) for k, v in params.items()}
    shuffle_rng = np.random.default_rng(derive_seed(train_cfg.seed, "shuffle"))

    records: list[EpochRecord] = []
    best_iou, best_epoch = -1.0, 0
    best_state: dict[str, torch.Tensor] = {}
    iteration = 0
    n = len(train_pairs)

    for epoch in range(1, train_cfg.epochs + 1):
        if train_ids is not None and val_ids is not None and not train_cfg.allow_overlap:
            assert set(train_ids).isdisjoint(val_ids)
        order = shuffle_rng.permutation(n)
        model.train()
        epoch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = torch.from_numpy(train_images[idx]).unsqueeze(1)
            scores = model(batch)
            loss = loss_for_batch(scores, train_masks[idx], loss_cfg)
            model.zero_grad()
            loss.backward()
            lr = lr_at(train_cfg, iteration)
            grads = {k: p.grad for k, p in params.items()}
            new_params, velocity = sgd_step(params, grads, lr, train_cfg.momentum, velocity)
            with torch.no_grad():
                for k, p in params.items():
                    p.copy_(new_params[k])
            iteration += 1
            epoch_losses.append(float(loss.detach()))

        val_iou = evaluate_iou(model, val_images, val_masks)
        records.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_iou, lr))
        if val_iou > best_iou:
            best_iou, best_epoch = val_iou, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if train_cfg.stop_at_iou is not None and best_iou >= train_cfg.stop_at_iou:
            break

    model.load_state_dict(best_state)
    history = TrainHistory(records=tuple(records), best_epoch=best_epoch, best_iou=best_iou)
    if log_path is not None:
        history.to_csv(log_path)
    return model, history
