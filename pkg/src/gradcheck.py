"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

from .errors import ContractError
from .losses import combined_loss, crack_probability
from .tensor import ComputationTape, Value

DEFAULT_STEP = 1e-3
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def num_checked(self) -> int:
        return sum(self.checked.values())

    def passed(self, tolerance: float = 1e-3) -> bool:
        return self.max_error < tolerance

    def to_frame(self) -> pd.DataFrame:
        rows = [{"name": n, "max_rel_error": e, "entries": self.checked[n]} for n, e in self.errors.items()]
        return pd.DataFrame(rows, columns=["name", "max_rel_error", "entries"])


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    return abs(analytic - numeric) / scale if scale else 0.0


def check_gradients(
    loss_fn: Callable[[], Value],
    params: dict[str, Value],
    eps: float = DEFAULT_STEP,
    entries_per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """
    Compare tape gradients of ``loss_fn()`` with central differences.

    Args:
        loss_fn (Callable[[], Value]): Rebuilds the scalar loss from the current parameter values.
        params (dict[str, Value]): Tunable parameters to check; their data must be writable.
        eps (float): Finite-difference step.
        entries_per_param (int): Entries sampled per parameter (all entries if the tensor is smaller).
        rng (np.random.Generator | None): Entry sampler.

    Returns:
        GradCheckReport: Max relative error per parameter over sampled entries with |g| > 1e-6.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with ComputationTape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    report = GradCheckReport()
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"{name} received no gradient")
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ContractError(f"{name} is not writable in place")
        grads = np.abs(p.grad.reshape(-1))
        candidates = np.flatnonzero(grads > GRAD_FLOOR)
        worst, used = 0.0, 0
        for idx in rng.choice(candidates, size=min(entries_per_param, candidates.size), replace=False):
            analytic = float(p.grad.reshape(-1)[idx])
            original = flat[idx]
            flat[idx] = original + eps
            plus = float(loss_fn().data)
            flat[idx] = original - eps
            minus = float(loss_fn().data)
            flat[idx] = original
            worst = max(worst, relative_error(analytic, (plus - minus) / (2 * eps)))
            used += 1
        report.errors[name] = worst
        report.checked[name] = used
    return report


def perturb_zero_deltas(model, rng: np.random.Generator, std: float = 0.02) -> list[str]:
    """Give all-zero tunable matrices (LoRA B, adapter up-projections) random values so gradients flow past them."""
    touched = []
    for name, p in model.named_parameters():
        if p.tunable and p.ndim > 1 and not np.any(p.data):
            p.data = (rng.standard_normal(p.shape) * std).astype(p.dtype)
            touched.append(name)
    return touched


def check_model_gradients(
    model,
    images: np.ndarray,
    masks: np.ndarray,
    lambda_ce: float = 0.2,
    eps: float = DEFAULT_STEP,
    entries_per_param: int = 3,
    seed: int = 0,
) -> GradCheckReport:
    """End-to-end check of the combined loss; the model is cast to float64 in place."""
    rng = np.random.default_rng(seed)
    model.astype(np.float64)
    perturb_zero_deltas(model, rng)
    images = np.asarray(images, dtype=np.float64)
    params = {name: p for name, p in model.named_parameters() if p.tunable}

    def loss_fn() -> Value:
        return combined_loss(crack_probability(model(images)), masks, lambda_ce)

    return check_gradients(loss_fn, params, eps, entries_per_param, rng)
