"""Fold plans, LR schedules, SGD updates, and the epoch loop."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bpseg.data_model import Arm, ConfigError, EmptyInput, ShapeMismatch
from bpseg.losses import LossConfig, combined_loss
from bpseg.metrics import IoUAccumulator, binarize, iou_accumulate, iou_value
from bpseg.network import NetworkConfig, build_model, predict_scores
from bpseg.training import (
    NonFiniteGradient,
    TooFewSamples,
    TrainConfig,
    TrainHistory,
    EpochRecord,
    evaluate_iou,
    loss_for_batch,
    lr_at,
    make_folds,
    sgd_step,
    train_fold,
)

TINY_NET = NetworkConfig(base_channels=4, depth=2, seed=3)


def tiny_pairs(count: int, seed: int, side: int = 16):
    """Synthetic (image, mask) pairs: a bright square on a dark field."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        img = rng.integers(0, 60, (side, side), dtype=np.uint8)
        mask = np.zeros((side, side), dtype=np.uint8)
        y, x = rng.integers(2, side - 8, 2)
        img[y : y + 6, x : x + 6] = rng.integers(180, 250)
        mask[y : y + 6, x : x + 6] = 1
        pairs.append((img, mask))
    return pairs


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 4
        assert cfg.lr_initial == 0.01
        assert cfg.lr_decrement == 1e-5
        assert cfg.lr_floor == 1e-5
        assert cfg.momentum == 0.0
        assert cfg.epochs == 60
        assert cfg.arm is Arm.ORIGINAL
        assert cfg.schedule == "linear"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"batch_size": 0},
            {"lr_initial": 0.0},
            {"epochs": 0},
            {"schedule": "cosine"},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestMakeFolds:
    def test_round_robin_sizes_135_over_10(self):
        ids = [f"s{i:03d}" for i in range(135)]
        plan = make_folds(ids, k=10, seed=1)
        assert sorted(plan.fold_sizes(), reverse=True) == [14] * 5 + [13] * 5

    def test_even_split_180_over_10(self):
        ids = [f"s{i:03d}" for i in range(180)]
        plan = make_folds(ids, k=10, seed=1)
        assert plan.fold_sizes() == [18] * 10

    def test_folds_partition_the_ids(self):
        ids = [f"s{i}" for i in range(23)]
        plan = make_folds(ids, k=4, seed=5)
        seen = []
        for f in range(4):
            seen.extend(plan.fold_ids(f))
        assert sorted(seen) == sorted(ids)
        for f in range(4):
            assert set(plan.fold_ids(f)).isdisjoint(plan.train_ids(f))
            assert sorted(plan.fold_ids(f)) + sorted(plan.train_ids(f)) != []

    def test_deterministic_and_order_insensitive(self):
        ids = [f"s{i}" for i in range(30)]
        a = make_folds(ids, k=3, seed=9)
        b = make_folds(list(reversed(ids)), k=3, seed=9)
        assert a.assignments == b.assignments

    def test_seed_changes_assignment(self):
        ids = [f"s{i}" for i in range(30)]
        a = make_folds(ids, k=3, seed=0)
        b = make_folds(ids, k=3, seed=1)
        assert a.assignments != b.assignments

    def test_too_few_ids(self):
        with pytest.raises(TooFewSamples):
            make_folds(["a", "b"], k=3, seed=0)

    def test_k_below_two(self):
        with pytest.raises(ConfigError):
            make_folds(["a", "b", "c"], k=1, seed=0)

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError):
            make_folds(["a", "a", "b"], k=2, seed=0)

    def test_trim_to_divisible(self):
        ids = [f"s{i:03d}" for i in range(135)]
        plan = make_folds(ids, k=10, seed=2, trim_to_divisible=True)
        assert len(plan.dropped) == 5
        assert plan.fold_sizes() == [13] * 10
        assigned = {i for f in range(10) for i in plan.fold_ids(f)}
        assert assigned | set(plan.dropped) == set(ids)
        assert assigned.isdisjoint(plan.dropped)

    def test_no_trim_when_divisible(self):
        plan = make_folds([f"s{i}" for i in range(20)], k=4, seed=2, trim_to_divisible=True)
        assert plan.dropped == ()

    @settings(max_examples=25)
    @given(n=st.integers(5, 60), k=st.integers(2, 5), seed=st.integers(0, 1000))
    def test_size_balance_property(self, n, k, seed):
        if n < k:
            return
        plan = make_folds([f"s{i}" for i in range(n)], k=k, seed=seed)
        sizes = plan.fold_sizes()
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1


class TestLrSchedule:
    def test_linear_examples(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 0) == 0.01
        assert lr_at(cfg, 100) == pytest.approx(0.009, abs=1e-15)
        assert lr_at(cfg, 999) == pytest.approx(0.01 - 999e-5, abs=1e-15)
        assert lr_at(cfg, 10_000) == cfg.lr_floor
        assert lr_at(cfg, 10**9) == cfg.lr_floor

    def test_poly_examples(self):
        cfg = TrainConfig(schedule="poly", poly_total_iters=1000)
        assert lr_at(cfg, 0) == 0.01
        assert lr_at(cfg, 500) == pytest.approx(0.01 * 0.5**0.9, abs=1e-12)
        assert lr_at(cfg, 1000) == cfg.lr_floor
        assert lr_at(cfg, 5000) == cfg.lr_floor

    def test_negative_iteration_rejected(self):
        with pytest.raises(ConfigError):
            lr_at(TrainConfig(), -1)

    @settings(max_examples=30)
    @given(
        schedule=st.sampled_from(["linear", "poly"]),
        i=st.integers(0, 20_000),
        j=st.integers(0, 20_000),
    )
    def test_non_increasing(self, schedule, i, j):
        cfg = TrainConfig(schedule=schedule)
        lo, hi = min(i, j), max(i, j)
        assert lr_at(cfg, lo) >= lr_at(cfg, hi)
        assert lr_at(cfg, hi) >= cfg.lr_floor


class TestSgdStep:
    def test_momentum_two_step_example(self):
        params = {"w": np.array([0.0])}
        grads = {"w": np.array([1.0])}
        velocity = {"w": np.array([0.0])}
        params, velocity = sgd_step(params, grads, lr=0.1, momentum=0.9, velocity=velocity)
        assert params["w"][0] == pytest.approx(-0.1)
        assert velocity["w"][0] == pytest.approx(1.0)
        params, velocity = sgd_step(params, grads, lr=0.1, momentum=0.9, velocity=velocity)
        assert velocity["w"][0] == pytest.approx(1.9)
        assert params["w"][0] == pytest.approx(-0.29)

    def test_zero_momentum_is_plain_descent(self):
        params = {"w": np.array([2.0, -1.0])}
        grads = {"w": np.array([0.5, -0.5])}
        velocity = {"w": np.zeros(2)}
        new_params, _ = sgd_step(params, grads, lr=0.2, momentum=0.0, velocity=velocity)
        assert np.allclose(new_params["w"], [2.0 - 0.1, -1.0 + 0.1])

    def test_inputs_not_mutated(self):
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([1.0])}
        velocity = {"w": np.array([0.5])}
        sgd_step(params, grads, lr=0.1, momentum=0.9, velocity=velocity)
        assert params["w"][0] == 1.0
        assert velocity["w"][0] == 0.5

    def test_works_on_torch_tensors(self):
        params = {"w": torch.tensor([0.0])}
        grads = {"w": torch.tensor([1.0])}
        velocity = {"w": torch.tensor([0.0])}
        for _ in range(2):
            params, velocity = sgd_step(params, grads, lr=0.1, momentum=0.9, velocity=velocity)
        assert params["w"].item() == pytest.approx(-0.29)

    def test_key_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            sgd_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.1, 0.0, {"a": np.zeros(1)})

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            sgd_step(
                {"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.1, 0.0, {"a": np.zeros(2)}
            )

    def test_non_finite_gradient_rejected(self):
        with pytest.raises(NonFiniteGradient):
            sgd_step(
                {"a": np.zeros(1)},
                {"a": np.array([np.nan])},
                0.1,
                0.0,
                {"a": np.zeros(1)},
            )


class TestLossBridge:
    def test_value_matches_numpy_loss(self):
        rng = np.random.default_rng(0)
        scores = torch.from_numpy(rng.uniform(-2, 2, (3, 1, 4, 4))).float()
        truth = rng.integers(0, 2, (3, 4, 4)).astype(np.float64)
        cfg = LossConfig()
        bridged = loss_for_batch(scores, truth, cfg)
        expected, _ = combined_loss(scores.squeeze(1).numpy(), truth, cfg)
        assert bridged.item() == pytest.approx(expected, abs=1e-6)

    def test_backward_replays_analytic_gradient(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(-2, 2, (2, 1, 4, 4))
        scores = torch.from_numpy(base).float().requires_grad_(True)
        truth = rng.integers(0, 2, (2, 4, 4)).astype(np.float64)
        cfg = LossConfig()
        loss_for_batch(scores, truth, cfg).backward()
        _, analytic = combined_loss(base.squeeze(1), truth, cfg)
        assert np.allclose(
            scores.grad.squeeze(1).numpy(), analytic, atol=1e-6
        )

    def test_arm_controls_loss_terms(self):
        rng = np.random.default_rng(2)
        base = rng.uniform(-2, 2, (2, 1, 4, 4))
        truth = rng.integers(0, 2, (2, 4, 4)).astype(np.float64)
        plain, _ = combined_loss(base.squeeze(1), truth, LossConfig(use_lovasz=False))
        mixed, _ = combined_loss(base.squeeze(1), truth, LossConfig(use_lovasz=True))
        assert plain != mixed  # fixture keeps the lovasz term nonzero


class TestEvaluateIoU:
    def test_matches_manual_accumulation(self):
        model = build_model(TINY_NET)
        pairs = tiny_pairs(4, seed=5)
        images = np.stack([p[0] for p in pairs])
        masks = np.stack([p[1] for p in pairs])
        got = evaluate_iou(model, images, masks)
        acc = IoUAccumulator()
        for score, mask in zip(predict_scores(model, images), masks):
            acc = iou_accumulate(acc, binarize(score), mask)
        assert got == iou_value(acc)


@pytest.fixture(scope="module")
def run():
    train = tiny_pairs(6, seed=10)
    val = tiny_pairs(3, seed=11)
    cfg = TrainConfig(batch_size=2, epochs=3, seed=21)
    model, history = train_fold(train, val, TINY_NET, cfg)
    return train, val, cfg, model, history


class TestTrainFold:
    def test_history_shape(self, run):
        _, _, cfg, _, history = run
        assert len(history.records) == cfg.epochs
        assert [r.epoch for r in history.records] == [1, 2, 3]
        for r in history.records:
            assert np.isfinite(r.train_loss)
            assert 0.0 <= r.val_iou <= 1.0
            assert r.lr > 0

    def test_best_epoch_is_earliest_max(self, run):
        _, _, _, _, history = run
        ious = [r.val_iou for r in history.records]
        assert history.best_iou == max(ious)
        assert history.best_epoch == ious.index(max(ious)) + 1

    def test_best_checkpoint_dominates_all_epochs(self, run):
        _, _, _, _, history = run
        assert all(history.best_iou >= r.val_iou for r in history.records)

    def test_returned_model_scores_best_iou(self, run):
        _, val, _, model, history = run
        images = np.stack([p[0] for p in val])
        masks = np.stack([p[1] for p in val])
        assert evaluate_iou(model, images, masks) == history.best_iou

    def test_fully_deterministic(self, run):
        train, val, cfg, model, history = run
        model2, history2 = train_fold(train, val, TINY_NET, cfg)
        assert history2 == history
        for (name, a), (_, b) in zip(
            model.state_dict().items(), model2.state_dict().items()
        ):
            assert torch.equal(a, b), name

    def test_seed_changes_trajectory(self, run):
        train, val, cfg, _, history = run
        _, other = train_fold(
            train, val, TINY_NET, TrainConfig(batch_size=2, epochs=3, seed=22)
        )
        assert [r.train_loss for r in other.records] != [
            r.train_loss for r in history.records
        ]

    def test_csv_log_written(self, tmp_path):
        train = tiny_pairs(4, seed=12)
        val = tiny_pairs(2, seed=13)
        cfg = TrainConfig(batch_size=2, epochs=2, seed=1)
        log = tmp_path / "log.csv"
        _, history = train_fold(train, val, TINY_NET, cfg, log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_iou,lr"
        assert len(lines) == 1 + len(history.records)
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[1]) == history.records[0].train_loss

    def test_empty_sets_rejected(self):
        with pytest.raises(EmptyInput):
            train_fold([], tiny_pairs(2, 0), TINY_NET, TrainConfig(epochs=1))
        with pytest.raises(EmptyInput):
            train_fold(tiny_pairs(2, 0), [], TINY_NET, TrainConfig(epochs=1))

    def test_id_overlap_rejected(self):
        train = tiny_pairs(2, seed=14)
        val = tiny_pairs(2, seed=15)
        with pytest.raises(ConfigError):
            train_fold(
                train,
                val,
                TINY_NET,
                TrainConfig(epochs=1),
                train_ids=["a", "b"],
                val_ids=["b", "c"],
            )

    def test_id_overlap_allowed_when_opted_in(self):
        pairs = tiny_pairs(2, seed=16)
        _, history = train_fold(
            pairs,
            pairs,
            TINY_NET,
            TrainConfig(epochs=1, allow_overlap=True),
            train_ids=["a", "b"],
            val_ids=["a", "b"],
        )
        assert len(history.records) == 1

    def test_early_stop_at_target_iou(self):
        train = tiny_pairs(4, seed=17)
        val = tiny_pairs(2, seed=18)
        cfg = TrainConfig(batch_size=2, epochs=50, seed=2, stop_at_iou=0.0)
        _, history = train_fold(train, val, TINY_NET, cfg)
        # any IoU satisfies a 0.0 target, so exactly one epoch runs
        assert len(history.records) == 1


def test_history_csv_round_trips_floats(tmp_path):
    history = TrainHistory(
        records=(EpochRecord(1, 0.123456789012345, 0.5, 0.01),),
        best_epoch=1,
        best_iou=0.5,
    )
    path = tmp_path / "h.csv"
    history.to_csv(path)
    row = path.read_text().splitlines()[1].split(",")
    assert float(row[1]) == 0.123456789012345
