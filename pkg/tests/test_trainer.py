import math
from pathlib import Path

import numpy as np
import pytest

from motionprior_hub.core import tensor as T
from motionprior_hub.core.exceptions import (
    ConfigurationError,
    ContractError,
    TrainingError,
    UnknownConfigKeyError,
)
from motionprior_hub.core.inference import predict_crop
from motionprior_hub.core.mapgrid import CropDataset, MapSample
from motionprior_hub.core.metrics import MetricReport, kl_div
from motionprior_hub.core.model import ModelWeights
from motionprior_hub.core.trainer import (
    HISTORY_HEADER,
    CVReport,
    EarlyStopping,
    FoldResult,
    OptimizerState,
    TrainConfig,
    absolute_lr,
    adamw_step,
    batch_loss,
    cross_validate,
    default_decay_mask,
    evaluate_loss,
    lr_at,
    split_maps,
    train,
    validation_count,
    write_history_csv,
    write_train_config,
)
from motionprior_hub.infra.storage import DatasetStorage
from motionprior_hub.ingest.config import IngestConfig
from motionprior_hub.ingest.dataset import (
    DatasetBuilder,
    InMemorySource,
    build_targets,
    load_dataset,
)
from motionprior_hub.ingest.synthetic import SceneConfig, generate_synthetic_scene

from conftest import striped_sample

# --- расписание ------------------------------------------------------------------


def test_absolute_lr_examples():
    assert absolute_lr(1e-4, 256) == 1e-4
    assert absolute_lr(1e-4, 64) == pytest.approx(2.5e-5)
    assert absolute_lr(1e-3, 512) == pytest.approx(2e-3)
    with pytest.raises(ContractError):
        absolute_lr(1e-4, 0)


@pytest.mark.parametrize(
    "epoch, expected",
    [(0, 0.0), (10, 5e-5), (20, 1e-4), (60, 5e-5), (100, 0.0)],
)
def test_lr_at_closed_form(epoch, expected):
    cfg = TrainConfig()
    assert lr_at(epoch, cfg) == pytest.approx(expected, abs=1e-12)


def test_lr_warmup_monotone_then_decay():
    cfg = TrainConfig(epochs_max=10, warmup_epochs=2)
    values = [lr_at(e / 4, cfg) for e in range(41)]
    peak = values.index(max(values))
    assert peak == 8
    assert all(a <= b for a, b in zip(values[:peak], values[1 : peak + 1]))
    assert all(a >= b for a, b in zip(values[peak:], values[peak + 1 :]))


# --- AdamW ---------------------------------------------------------------------


def test_adamw_matches_scalar_oracle():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    params = {"x": np.array([1.0])}
    state = OptimizerState()
    for t in range(1, 6):
        g = x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        params, state = adamw_step(params, {"x": params["x"].copy()}, state, lr, 0.0)
        assert abs(params["x"][0] - x) < 1e-12
    assert state.step == 5


def test_adamw_decoupled_decay_and_zero_grads():
    params = {"w": np.array([[1.0, -2.0]])}
    zero = {"w": np.zeros((1, 2))}
    out, _ = adamw_step(params, zero, OptimizerState(), 0.1, 0.0)
    assert np.array_equal(out["w"], params["w"])
    out, _ = adamw_step(params, zero, OptimizerState(), 0.1, 0.3)
    assert np.allclose(out["w"], params["w"] * 0.97, rtol=0, atol=1e-15)


def test_adamw_first_step_magnitude():
    out, state = adamw_step(
        {"x": np.array([0.0])}, {"x": np.array([1.0])}, OptimizerState(), 0.01, 0.0
    )
    assert out["x"][0] == pytest.approx(-0.01, rel=1e-6)
    assert state.m["x"].shape == (1,)


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(TrainingError) as err:
        adamw_step(
            {"head.bias": np.zeros(2)},
            {"head.bias": np.array([np.nan, 0.0])},
            OptimizerState(step=4),
            0.1,
            0.0,
        )
    assert err.value.param_name == "head.bias" and err.value.step == 5


def test_decay_mask_excludes_vectors():
    params = {"w": np.zeros((2, 2)), "b": np.zeros(2), "mask_token": np.zeros(4)}
    assert default_decay_mask(params) == {"w": True, "b": False, "mask_token": False}
    out, _ = adamw_step(
        {"b": np.ones(2)}, {"b": np.zeros(2)}, OptimizerState(), 0.1, 0.3, {"b": False}
    )
    assert np.array_equal(out["b"], np.ones(2))


def test_early_stopping_waits_patience():
    stopper = EarlyStopping(15)
    stopped = None
    for epoch in range(1, 101):
        stopper.update(epoch, 1.0 / epoch if epoch <= 3 else 1.0)
        if stopper.should_stop(epoch):
            stopped = epoch
            break
    assert stopped == 18 and stopper.best_epoch == 3


# --- конфигурация --------------------------------------------------------------


def test_train_config_from_mapping_and_overrides():
    cfg = TrainConfig.from_mapping(
        {"epochs_max": "10", "warmup_epochs": "2", "heads": "occupancy, stops"}
    )
    assert cfg.epochs_max == 10 and cfg.heads == ("occupancy", "stops")
    assert cfg.with_overrides(patience=3, seed=None).patience == 3
    assert cfg.with_overrides(seed=None).seed == 0
    with pytest.raises(UnknownConfigKeyError):
        TrainConfig.from_mapping({"learning_rate": "0.1"})
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs_max=10, warmup_epochs=10)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_mapping({"epochs_max": "ten"})


def test_train_config_file_round_trip(tmp_path):
    cfg = TrainConfig(base_lr=3e-4, heads=("occupancy", "velocity"), mask_ratio=0.75)
    path = write_train_config(cfg, tmp_path / "train.cfg")
    assert TrainConfig.from_file(path) == cfg
    with pytest.raises(ConfigurationError, match="missing.cfg"):
        TrainConfig.from_file(tmp_path / "missing.cfg")


def test_sample_config_matches_defaults():
    sample = Path(__file__).resolve().parents[1] / "data" / "train_desk.cfg"
    assert TrainConfig.from_file(sample) == TrainConfig()


def test_history_csv(tmp_path):
    path = write_history_csv([], tmp_path / "history.csv")
    assert path.read_text(encoding="utf-8") == HISTORY_HEADER + "\n"


# --- разбиение по картам -------------------------------------------------------


@pytest.mark.parametrize("n, expected", [(1, 1), (5, 1), (8, 2), (10, 2), (13, 3)])
def test_validation_count(n, expected):
    assert validation_count(n, 0.2) == expected


def test_validation_count_rounds_half_up():
    assert validation_count(3, 0.5) == 2


def test_split_maps_is_disjoint():
    samples = [striped_sample(f"map_{i}", seed=i) for i in range(5)]
    train_maps, val_maps = split_maps(samples, 0.2, np.random.default_rng(0))
    names = {s.map_id for s in train_maps} | {s.map_id for s in val_maps}
    assert len(val_maps) == 1 and len(train_maps) == 4
    assert names == {s.map_id for s in samples}
    pair_train, pair_val = split_maps(samples[:2], 0.9, np.random.default_rng(0))
    assert len(pair_train) == 1 and len(pair_val) == 1
    with pytest.raises(ConfigurationError):
        split_maps(samples[:1], 0.2, np.random.default_rng(0))


# --- обучение ------------------------------------------------------------------


def _small_cfg(**overrides):
    params = dict(
        epochs_max=3,
        warmup_epochs=1,
        total_batch_size=4,
        base_lr=0.05,
        patience=5,
        crop_size=8,
        patch_size=4,
        seed=11,
    )
    params.update(overrides)
    return TrainConfig(**params)


def test_train_is_deterministic(tiny_weights):
    train_data = CropDataset([striped_sample("a")], ("occupancy",), 8)
    val_data = CropDataset([striped_sample("b", seed=1)], ("occupancy",), 8)
    cfg = _small_cfg()
    first = train(tiny_weights, train_data, val_data, cfg)
    second = train(tiny_weights, train_data, val_data, cfg)
    assert first.history == second.history
    assert first.weights.checksum() == second.weights.checksum()
    assert first.steps == 9 and len(first.history) == 3
    assert first.weights.target_scales == {"occupancy": 64.0}
    assert [row.epoch for row in first.history] == [1, 2, 3]
    assert first.best_val_loss == min(row.val_loss for row in first.history)


def test_train_masked_policy_runs(tiny_weights, tmp_path):
    data = CropDataset([striped_sample("a")], ("occupancy",), 8)
    cfg = _small_cfg(epochs_max=2, mask_ratio=0.5)
    result = train(tiny_weights, data, data, cfg, history_path=tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == HISTORY_HEADER and len(lines) == 3
    assert all(np.isfinite(row.train_loss) for row in result.history)


def test_train_rejects_empty_split(tiny_weights):
    data = CropDataset([striped_sample("a")], ("occupancy",), 8)
    with pytest.raises(ConfigurationError):
        train(tiny_weights, data, CropDataset([], ("occupancy",), 8), _small_cfg())


def _scene_sample(map_id, seed, size=64, walkers=60, **scene):
    cfg = SceneConfig(height=size, width=size, walkers=walkers, seed=seed, **scene)
    generated = generate_synthetic_scene(cfg)
    targets, _, _ = build_targets(
        generated.semantic_map, generated.trajectories, IngestConfig()
    )
    return MapSample(
        map_id,
        generated.semantic_map,
        {"occupancy": targets["occupancy"]},
        np.zeros((8, 2), dtype=np.int64),
        np.arange(8, dtype=np.int64),
    )


def _inverted(sample):
    occupancy = (sample.targets["occupancy"] == 0).astype(np.float64)
    return MapSample(
        f"{sample.map_id}_inv",
        sample.semantic_map,
        {"occupancy": occupancy / occupancy.sum()},
        sample.crop_origins,
        sample.crop_transforms,
    )


def test_single_step_decreases_desk_loss(f64):
    data = CropDataset([_scene_sample("step", seed=3)], ("occupancy",), 64)
    channels, targets = data.batch(np.arange(4), np.float64)
    arch = TrainConfig().arch(13)
    for seed in range(10):
        weights = ModelWeights.initialize(arch, np.random.default_rng(seed))
        params = weights.bind(requires_grad=True)
        before = batch_loss(weights, params, channels, targets, 0.0, "all")
        grads = T.backward(before, wrt=params.values())
        named = {name: grads[t] for name, t in params.items()}
        weights.params, _ = adamw_step(
            weights.params, named, OptimizerState(), 1e-3, 0.3
        )
        after = batch_loss(weights, weights.bind(), channels, targets, 0.0, "all")
        assert after.item() < before.item(), seed


def test_early_stop_returns_best_epoch_weights(tiny_weights):
    train_data = CropDataset([striped_sample("a")], ("occupancy",), 8)
    val_data = CropDataset([_inverted(striped_sample("a"))], ("occupancy",), 8)
    cfg = _small_cfg(epochs_max=30, patience=1, base_lr=2.0)
    result = train(tiny_weights, train_data, val_data, cfg)
    val_losses = [row.val_loss for row in result.history]
    assert result.stopped_early and len(val_losses) < 30
    assert result.best_val_loss == min(val_losses)
    assert val_losses[-1] >= result.best_val_loss
    assert result.best_epoch < len(result.history)
    assert result.best_epoch == val_losses.index(min(val_losses)) + 1
    restored = evaluate_loss(result.weights, val_data, cfg.total_batch_size)
    assert restored == pytest.approx(result.best_val_loss, rel=1e-9)


@pytest.mark.slow
def test_train_overfits_eight_desk_crops():
    sample = _scene_sample("overfit", seed=4, pause_probability=0.0)
    data = CropDataset([sample], ("occupancy",), 64)
    cfg = TrainConfig(
        epochs_max=2000,
        warmup_epochs=20,
        total_batch_size=8,
        base_lr=0.032,
        weight_decay=0.0,
        patience=2000,
        mask_ratio=0.0,
        seed=5,
    )
    assert absolute_lr(cfg.base_lr, cfg.total_batch_size) == pytest.approx(1e-3)
    with T.numeric_mode("f32", check_finite=False):
        weights = ModelWeights.initialize(cfg.arch(13), np.random.default_rng(5))
        result = train(weights, data, data, cfg)
        assert result.steps <= 2000
        assert result.best_val_loss < 1e-3
        channels, targets = data.batch(np.arange(len(data)), np.float64)
        for b in range(len(data)):
            gt = targets["occupancy"][b]
            pred = predict_crop(result.weights, channels[b].astype(np.float32))
            guess = np.clip(pred["occupancy"], 0.0, None)
            assert kl_div(gt / gt.sum(), guess / guess.sum()) < 0.05, b


# --- кросс-валидация -----------------------------------------------------------


def _report(value):
    return MetricReport(value, value, value, 1e-12, (4, 4), "exact")


def test_cv_report_aggregate_and_csv():
    folds = [
        FoldResult(f"map_{i}", [], [], 1, [], {("occupancy", "model"): _report(0.5)})
        for i in range(3)
    ]
    report = CVReport(folds)
    mean, std = report.aggregate()[("occupancy", "model", "kl")]
    assert mean == 0.5 and std == 0.0
    lines = report.csv_text().splitlines()
    assert lines[0] == "map_id,head,predictor,kl,rkl,emd,emd_mode"
    assert lines[-2].startswith("MEAN,occupancy,model,0.5,0.5,0.5")
    assert lines[-1].startswith("STD,occupancy,model,0.0,0.0,0.0")


def test_cross_validate_needs_three_maps():
    samples = [striped_sample("a"), striped_sample("b", seed=1)]
    with pytest.raises(ConfigurationError):
        cross_validate(samples, _small_cfg())


def test_cross_validate_is_bit_reproducible(tmp_path):
    samples = [striped_sample(f"map_{i}", seed=i) for i in range(3)]
    cfg = _small_cfg(epochs_max=2, patience=2)
    with T.numeric_mode("f32", check_finite=False):
        first = cross_validate(samples, cfg, jobs=1, stride=4)
        second = cross_validate(samples, cfg, jobs=3, stride=4, out_dir=tmp_path)
    assert first.csv_text() == second.csv_text()
    assert [f.history for f in first.folds] == [f.history for f in second.folds]
    assert (tmp_path / "cv_report.csv").read_text(encoding="utf-8") == (
        first.csv_text()
    )
    assert sorted(p.name for p in tmp_path.glob("history_fold*.csv")) == [
        "history_fold00.csv",
        "history_fold01.csv",
        "history_fold02.csv",
    ]
    assert [fold.map_id for fold in first.folds] == ["map_0", "map_1", "map_2"]


@pytest.mark.slow
def test_cross_validate_beats_uniform_on_every_map(tmp_path):
    config = IngestConfig(CROPS_PER_MAP=16, AUGMENTATIONS_PER_CROP=2, CROP_SIZE=64)
    builder = DatasetBuilder(config, DatasetStorage(tmp_path / "maps"), seed=3)
    sources = []
    for i in range(4):
        scene = SceneConfig(height=96, width=96, walkers=80, seed=100 + i)
        generated = generate_synthetic_scene(scene)
        sources.append(
            InMemorySource(f"map_{i}", generated.semantic_map, generated.trajectories)
        )
    builder.build(sources)
    samples = load_dataset(tmp_path)
    cfg = TrainConfig(
        epochs_max=40,
        warmup_epochs=4,
        total_batch_size=16,
        base_lr=0.016,
        patience=40,
        seed=9,
    )
    with T.numeric_mode("f32", check_finite=False):
        report = cross_validate(samples, cfg, jobs=4)
    assert [fold.map_id for fold in report.folds] == [f"map_{i}" for i in range(4)]
    for fold in report.folds:
        model = fold.scores[("occupancy", "model")].kl
        uniform = fold.scores[("occupancy", "uniform")].kl
        assert model < uniform, fold.map_id
