"""
Training: poly learning-rate schedule with linear warm-up, AdamW with
decoupled weight decay, rotation/flip augmentation and the epoch loop that
keeps the tunable snapshot with the best validation F1.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .archive import save_archive
from .base import CrackSAMBase
from .errors import ConfigError, ContractError, NumericError
from .losses import combined_loss, crack_probability
from .metrics import Evaluator
from .tensor import ComputationTape, Value

EPOCH_LOG_COLUMNS = ["epoch", "mean_train_loss", "val_precision", "val_recall", "val_f1", "val_iou", "lr"]
CHECKPOINT_FILE = "best_checkpoint.csam"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 4e-4
    warmup_iters: int = 300
    power: float = 6.0
    epochs: int = 140
    batch_size: int = 8
    lambda_ce: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    binarize_threshold: float = 0.5
    num_workers: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_ce <= 1.0:
            raise ConfigError(f"lambda_ce must be in [0, 1], got {self.lambda_ce}")
        for name in ("lr0", "power", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("warmup_iters", "weight_decay", "num_workers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got ({self.beta1}, {self.beta2})")


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    val_f1: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: pd.DataFrame
    step_losses: list[float]
    checkpoint_path: str | None = None
    log_path: str | None = None


def lr_schedule(iteration: int, cfg: TrainConfig, max_iter: int) -> float:
    """Linear warm-up to ``lr0``, then ``lr0 * (1 - progress) ** power`` floored at 0."""
    if iteration < cfg.warmup_iters:
        return cfg.lr0 * iteration / cfg.warmup_iters
    progress = (iteration - cfg.warmup_iters) / max(max_iter, 1)
    return cfg.lr0 * max(0.0, 1.0 - progress) ** cfg.power


def decays(name: str, param: Value) -> bool:
    """Weight decay applies to matrices and kernels only, never to biases or norm parameters."""
    return param.ndim > 1


def adamw_step(params: dict[str, Value], state: OptimizerState, lr: float, cfg: TrainConfig) -> OptimizerState:
    """
    One bias-corrected Adam update with decoupled weight decay, in place.

    Args:
        params (dict[str, Value]): Parameters by name; frozen ones are skipped.
        state (OptimizerState): Moments and step counter, updated in place.
        lr (float): Learning rate for this step.
        cfg (TrainConfig): Betas, eps and weight decay.

    Returns:
        OptimizerState: The same state object.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - cfg.beta1**t
    correction2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        if not p.tunable:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        m = state.exp_avg[name] = cfg.beta1 * state.exp_avg[name] + (1.0 - cfg.beta1) * grad
        v = state.exp_avg_sq[name] = cfg.beta2 * state.exp_avg_sq[name] + (1.0 - cfg.beta2) * grad * grad

        data = p.data
        if cfg.weight_decay and decays(name, p):
            data = data * (1.0 - lr * cfg.weight_decay)
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        p.data = (data - lr * update).astype(p.dtype, copy=False)
    return state


def draw_transform(rng: np.random.Generator) -> tuple[int, bool, bool]:
    """(quarter turns, horizontal flip, vertical flip)."""
    return int(rng.integers(4)), bool(rng.random() < 0.5), bool(rng.random() < 0.5)


def apply_transform(array: np.ndarray, transform: tuple[int, bool, bool]) -> np.ndarray:
    """Apply a drawn transform to the last two (spatial) axes."""
    k, hflip, vflip = transform
    out = np.rot90(array, k, axes=(-2, -1))
    if hflip:
        out = out[..., :, ::-1]
    if vflip:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def augment(sample, rng: np.random.Generator):
    transform = draw_transform(rng)
    return replace(sample, image=apply_transform(sample.image, transform), mask=apply_transform(sample.mask, transform))


def binarize(x: np.ndarray, threshold: float = 0.5, mode: str = "threshold") -> np.ndarray:
    """
    Threshold mode: crack where probability >= threshold.
    Argmax mode: class index of the maximum over the channel axis (third from last).
    """
    x = np.asarray(x)
    if mode == "threshold":
        return (x >= threshold).astype(np.uint8)
    if mode == "argmax":
        return np.argmax(x, axis=-3).astype(np.uint8)
    raise ValueError(f"binarize mode must be 'threshold' or 'argmax', got {mode!r}")


class Trainer(CrackSAMBase):
    def __init__(self, config: TrainConfig, log_level: str = "WARNING", output_dir: str = "./") -> None:
        """
        Initialize the Trainer class.

        Args:
            config (TrainConfig): Optimization and schedule settings.
            log_level (str): The logging level. Defaults to "WARNING".
            output_dir (str): Directory for the epoch log and best checkpoint. Defaults to "./".
        """
        super().__init__(log_level, output_dir)
        self.config = config

    def _sample_rng(self, epoch: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, epoch, index])

    def _assemble(self, dataset: Sequence, indices: np.ndarray, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        def load(index):
            return augment(dataset[index], self._sample_rng(epoch, int(index)))

        if self.config.num_workers > 0:
            with ThreadPoolExecutor(max_workers=self.config.num_workers) as pool:
                samples = list(pool.map(load, indices))
        else:
            samples = [load(i) for i in indices]
        images = np.stack([s.image for s in samples]).astype(np.float32)
        masks = np.stack([s.mask for s in samples]).astype(np.float32)
        return images, masks

    def fit(
        self,
        model,
        train_set: Sequence,
        val_set: Sequence,
        run_name: str = "run",
        metadata: dict | None = None,
        save: bool = True,
    ) -> TrainResult:
        """
        Train the tunable parameters of ``model`` and keep the best-F1 snapshot.

        On return the model holds the best-F1 weights, not those of the last epoch.

        Args:
            model: A CrackSAM model with deltas attached and a freeze mask applied.
            train_set (Sequence): Training SampleRecords.
            val_set (Sequence): Validation SampleRecords, scored after every epoch.
            run_name (str): Identifier used in the epoch log file name.
            metadata (dict | None): Stored in the checkpoint archive header.
            save (bool): Write the epoch log CSV and the checkpoint archive.

        Returns:
            TrainResult: Best checkpoint, epoch log and per-step losses.
        """
        cfg = self.config
        params = {name: p for name, p in model.named_parameters() if p.tunable}
        if not params:
            raise ContractError("model has no tunable parameters")
        if len(train_set) == 0:
            raise ContractError("training set is empty")

        steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
        max_iter = max(cfg.epochs * steps_per_epoch - cfg.warmup_iters, 1)
        state = OptimizerState()
        evaluator = Evaluator(
            self.log_level, self.output_dir, batch_size=cfg.batch_size, threshold=cfg.binarize_threshold
        )

        rows, step_losses = [], []
        best: Checkpoint | None = None
        iteration = 0
        lr = 0.0
        self.logger.info(
            f"Training {sum(p.size for p in params.values())} tunable parameters "
            f"for {cfg.epochs} epochs x {steps_per_epoch} steps"
        )
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                images, masks = self._assemble(train_set, order[start : start + cfg.batch_size], epoch)
                lr = lr_schedule(iteration, cfg, max_iter)
                model.zero_grad()
                with ComputationTape() as tape:
                    loss = combined_loss(crack_probability(model(images)), masks, cfg.lambda_ce)
                value = float(loss.data)
                if not np.isfinite(value):
                    self.logger.error(f"Non-finite loss {value} at epoch {epoch}, step {iteration}")
                    raise NumericError(f"loss became {value} at epoch {epoch}, step {iteration}")
                tape.backward(loss)
                adamw_step(params, state, lr, cfg)
                self.logger.debug(f"step {iteration}: loss={value:.5f} lr={lr:.3e}")
                epoch_losses.append(value)
                step_losses.append(value)
                iteration += 1

            report = evaluator.evaluate_dataset(model, val_set)
            mean_loss = float(np.mean(epoch_losses))
            rows.append([epoch, mean_loss, report.precision, report.recall, report.f1, report.iou, lr])
            self.logger.info(
                f"Epoch {epoch}: loss={mean_loss:.4f} val_f1={report.f1:.4f} val_iou={report.iou:.4f}"
            )
            if best is None or report.f1 > best.val_f1:
                snapshot = {name: p.data.copy() for name, p in params.items()}
                best = Checkpoint(snapshot, epoch, report.f1)

        for name, p in params.items():
            p.data = best.params[name].copy()
        self.logger.info(f"Restored best weights from epoch {best.epoch} (val F1 {best.val_f1:.4f})")

        log = pd.DataFrame(rows, columns=EPOCH_LOG_COLUMNS)
        result = TrainResult(best, log, step_losses)
        if save:
            result.log_path = self._write_csv(log, "epoch_log", run_name)
            result.checkpoint_path = os.path.join(self._ensure_output_dir(), CHECKPOINT_FILE)
            header = dict(metadata or {})
            header.update({"epoch": best.epoch, "val_f1": best.val_f1, "subset": "tunable"})
            save_archive(result.checkpoint_path, best.params, header)
            self.logger.info(f"Best checkpoint (epoch {best.epoch}, F1 {best.val_f1:.4f}) written: {result.checkpoint_path}")
        return result
