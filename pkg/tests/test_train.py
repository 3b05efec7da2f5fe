import os
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from src import train as train_module
from src.archive import load_archive, load_into_model
from src.dataset import SampleRecord
from src.encoder import EncoderConfig
from src.errors import ConfigError, ContractError, NumericError
from src.metrics import Evaluator
from src.model import build_model
from src.noise import NoiseSpec
from src.peft import LoRAConfig, attach_deltas
from src.synth import SyntheticCrackGenerator
from src.tensor import Value
from src.train import (
    CHECKPOINT_FILE,
    EPOCH_LOG_COLUMNS,
    OptimizerState,
    TrainConfig,
    Trainer,
    adamw_step,
    apply_transform,
    augment,
    binarize,
    draw_transform,
    lr_schedule,
)


@pytest.fixture
def cfg():
    return TrainConfig()


def tunable(data):
    return Value(np.asarray(data, dtype=np.float64), tunable=True)


def lora_model(seed=0):
    model = build_model(EncoderConfig.preset("vit_toy"), seed=seed)
    attach_deltas(model, lora=LoRAConfig(rank=2), seed=seed + 1)
    return model


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_ce=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0)


def test_lr_schedule_values(cfg):
    max_iter = 1000
    assert lr_schedule(0, cfg, max_iter) == 0.0
    assert lr_schedule(150, cfg, max_iter) == pytest.approx(2e-4)
    assert lr_schedule(300, cfg, max_iter) == pytest.approx(4e-4)
    assert lr_schedule(300 + max_iter // 2, cfg, max_iter) == pytest.approx(6.25e-6)
    assert lr_schedule(300 + max_iter, cfg, max_iter) == 0.0
    assert lr_schedule(300 + 2 * max_iter, cfg, max_iter) == 0.0


def test_lr_schedule_non_increasing_after_warmup(cfg):
    values = [lr_schedule(i, cfg, 500) for i in range(300, 900)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_adamw_zero_gradient_zero_decay():
    p = tunable([[1.0, -2.0], [3.0, 0.5]])
    p.grad = np.zeros((2, 2))
    adamw_step({"w": p}, OptimizerState(), 1e-2, TrainConfig(weight_decay=0.0))
    assert np.array_equal(p.data, [[1.0, -2.0], [3.0, 0.5]])


def test_adamw_first_step_is_lr():
    p = tunable([0.5])
    p.grad = np.array([1.0])
    state = adamw_step({"b": p}, OptimizerState(), 1e-3, TrainConfig(weight_decay=0.0))
    assert p.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-6)
    assert state.step == 1


def test_adamw_decoupled_decay_skips_vectors():
    w = tunable(np.full((2, 2), 2.0))
    b = tunable(np.full(2, 2.0))
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    adamw_step({"w": w, "b": b}, OptimizerState(), 0.1, TrainConfig(weight_decay=0.01))
    assert np.allclose(w.data, 2.0 * (1 - 0.1 * 0.01))
    assert np.array_equal(b.data, [2.0, 2.0])


def test_adamw_ignores_frozen():
    frozen = Value(np.ones(3))
    frozen.grad = np.ones(3)
    state = adamw_step({"f": frozen}, OptimizerState(), 0.1, TrainConfig())
    assert np.array_equal(frozen.data, np.ones(3))
    assert "f" not in state.exp_avg


def test_identity_transform():
    arr = np.arange(2 * 3 * 3).reshape(2, 3, 3)
    assert np.array_equal(apply_transform(arr, (0, False, False)), arr)
    twice = apply_transform(apply_transform(arr, (0, True, False)), (0, True, False))
    assert np.array_equal(twice, arr)


def test_augment_keeps_alignment():
    rng = np.random.default_rng(0)
    mask = (rng.uniform(size=(8, 8)) > 0.7).astype(np.uint8)
    image = np.stack([mask.astype(np.float32)] * 3)
    sample = SampleRecord("s", image, mask)
    for seed in range(12):
        out = augment(sample, np.random.default_rng(seed))
        expected = apply_transform(mask, draw_transform(np.random.default_rng(seed)))
        assert np.array_equal(out.mask, expected)
        assert np.array_equal(out.image[0], out.mask.astype(np.float32))
        assert out.mask.sum() == mask.sum()


def test_binarize_modes():
    assert binarize(np.array([0.5]))[0] == 1
    assert binarize(np.array([0.4999]))[0] == 0
    assert binarize(np.array([[[0.7]], [[0.3]]]), mode="argmax")[0, 0] == 0
    with pytest.raises(ValueError):
        binarize(np.zeros(2), mode="median")


def test_threshold_and_argmax_agree_for_two_classes():
    logits = np.random.default_rng(1).normal(size=(2, 100, 100)) * 3
    probs = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    assert np.array_equal(binarize(probs[1]), binarize(probs, mode="argmax"))


@pytest.fixture
def tiny_sets():
    generator = SyntheticCrackGenerator()
    return generator.samples(6, 64, 0), generator.samples(4, 64, 1)


def test_fit_updates_only_tunables(tmp_path, tiny_sets):
    model = lora_model()
    frozen = {n: p.data.copy() for n, p in model.named_parameters() if not p.tunable}
    config = TrainConfig(epochs=2, batch_size=3, warmup_iters=1, lr0=1e-3)
    result = Trainer(config, output_dir=str(tmp_path)).fit(model, *tiny_sets, run_name="tiny")

    for name, p in model.named_parameters():
        if name in frozen:
            assert np.array_equal(p.data, frozen[name]), name
    assert len(result.log) == 2
    assert list(result.log.columns) == EPOCH_LOG_COLUMNS
    assert len(result.step_losses) == 4
    assert set(result.checkpoint.params) == {n for n, p in model.named_parameters() if p.tunable}

    log = pd.read_csv(os.path.join(tmp_path, "epoch_log_tiny.csv"))
    assert list(log["epoch"]) == [0, 1]


def test_frozen_weights_survive_100_steps(tiny_sets):
    model = lora_model()
    frozen = {n: p.data.copy() for n, p in model.named_parameters() if not p.tunable}
    train_set = SyntheticCrackGenerator().samples(100, 64, 5)
    config = TrainConfig(epochs=1, batch_size=1, warmup_iters=10, lr0=1e-3)
    result = Trainer(config).fit(model, train_set, tiny_sets[1][:1], save=False)

    assert len(result.step_losses) == 100
    for name, p in model.named_parameters():
        if name in frozen:
            assert np.array_equal(p.data, frozen[name]), name


def test_fit_leaves_best_weights_in_model(tiny_sets):
    config = TrainConfig(epochs=3, batch_size=3, warmup_iters=1, lr0=1e-3)
    model = lora_model()
    result = Trainer(config).fit(model, *tiny_sets, save=False)

    for name, value in result.checkpoint.params.items():
        assert np.array_equal(model.parameter_dict()[name].data, value), name
    report = Evaluator(batch_size=config.batch_size).evaluate_dataset(model, tiny_sets[1])
    assert report.f1 == pytest.approx(result.checkpoint.val_f1, abs=1e-6)


def test_checkpoint_round_trip_reproduces_val_f1(tmp_path, tiny_sets):
    config = TrainConfig(epochs=2, batch_size=3, warmup_iters=1, lr0=1e-3)
    result = Trainer(config, output_dir=str(tmp_path)).fit(lora_model(), *tiny_sets, metadata={"run": "rt"})
    assert result.checkpoint_path == os.path.join(str(tmp_path), CHECKPOINT_FILE)

    arrays, metadata = load_archive(result.checkpoint_path)
    assert metadata["subset"] == "tunable"
    assert metadata["run"] == "rt"
    assert metadata["epoch"] == result.checkpoint.epoch

    fresh = lora_model()
    load_into_model(fresh, result.checkpoint_path)
    report = Evaluator(batch_size=config.batch_size).evaluate_dataset(fresh, tiny_sets[1])
    assert report.f1 == pytest.approx(result.checkpoint.val_f1, abs=1e-6)


def test_fit_is_reproducible(tiny_sets):
    config = TrainConfig(epochs=1, batch_size=3, warmup_iters=1, lr0=1e-3)
    a = Trainer(config).fit(lora_model(), *tiny_sets, save=False)
    b = Trainer(config).fit(lora_model(), *tiny_sets, save=False)
    assert a.step_losses == b.step_losses


def test_fit_aborts_on_nan_loss(tiny_sets):
    nan = Value(np.array(np.nan))
    with patch.object(train_module, "combined_loss", return_value=nan):
        with pytest.raises(NumericError, match="step 0"):
            Trainer(TrainConfig(epochs=1, batch_size=3)).fit(lora_model(), *tiny_sets, save=False)


def test_fit_requires_tunables(tiny_sets):
    model = lora_model()
    model.set_tunable(False)
    with pytest.raises(ContractError):
        Trainer(TrainConfig(epochs=1)).fit(model, *tiny_sets, save=False)


@pytest.mark.slow
def test_desk_scale_training_learns_cracks(tmp_path):
    generator = SyntheticCrackGenerator()
    train_set = generator.samples(200, 64, 10)
    val_set = generator.samples(40, 64, 11)
    test_set = generator.samples(40, 64, 12)
    config = TrainConfig(epochs=20, batch_size=8, warmup_iters=25, lr0=1e-3)
    model = lora_model()
    result = Trainer(config, output_dir=str(tmp_path)).fit(model, train_set, val_set)
    assert result.log["mean_train_loss"].iloc[-1] < 0.5 * result.log["mean_train_loss"].iloc[0]

    load_into_model(model, result.checkpoint_path)
    evaluator = Evaluator()
    clean = evaluator.evaluate_dataset(model, test_set)
    assert clean.iou >= 0.5
    for case in (1, 2):
        assert evaluator.evaluate_dataset(model, test_set, NoiseSpec(case)).iou < clean.iou
