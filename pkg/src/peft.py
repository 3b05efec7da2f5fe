"""
Parameter-efficient deltas for the image encoder.

Two families are supported and may be combined:

* adapters: a bottleneck ``W_up . GELU(W_down . x + b_down) + b_up`` placed
  sequentially after window attention and/or in parallel with the block MLP;
* LoRA: a rank-r update ``x @ A @ B`` added to the query/key/value/proj
  projections of window attention.

Both start as an exact identity (``W_up = 0``, ``B = 0``), so a freshly
attached model reproduces the base model bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import tensor as T
from .errors import ConfigError, ContractError
from .layers import Initializer, LayerNorm, Linear, MLP, Module
from .tensor import Value
from .utils import LORA_TARGETS, is_valid_lora_target

ADAPTER_PLACEMENTS = ("sequential", "parallel")
DELTA_PREFIXES = ("adapter_", "lora_")
DECODER_PREFIXES = ("prompt_encoder.", "mask_decoder.")
PARAMETER_FILTERS = ("all", "tunable", "delta")


@dataclass(frozen=True)
class AdapterConfig:
    middle_dim: int = 32
    scaling: float = 0.2
    placement: tuple[str, ...] = ADAPTER_PLACEMENTS

    def __post_init__(self) -> None:
        if self.middle_dim < 1:
            raise ConfigError(f"adapter middle_dim must be >= 1, got {self.middle_dim}")
        if self.scaling < 0:
            raise ConfigError(f"adapter scaling must be >= 0, got {self.scaling}")
        unknown = [p for p in self.placement if p not in ADAPTER_PLACEMENTS]
        if unknown or not self.placement:
            raise ConfigError(f"adapter placement must be a non-empty subset of {ADAPTER_PLACEMENTS}, got {self.placement}")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        bad = [t for t in self.targets if not is_valid_lora_target(t)]
        if bad or not self.targets:
            raise ConfigError(f"LoRA targets must be a non-empty subset of {LORA_TARGETS}, got {self.targets}")


@dataclass(frozen=True)
class DeltaSpec:
    """Which deltas a run attaches; either part may be absent."""

    adapter: AdapterConfig | None = None
    lora: LoRAConfig | None = None


@dataclass(frozen=True)
class FreezeMask:
    """Names of the parameters that receive gradients; everything else is frozen."""

    tunable: frozenset[str] = field(default_factory=frozenset)

    def __contains__(self, name: str) -> bool:
        return name in self.tunable

    def __len__(self) -> int:
        return len(self.tunable)

    def apply(self, model: Module) -> None:
        for name, p in model.named_parameters():
            p.tunable = name in self.tunable


# adapters


class Adapter(Module):
    def __init__(self, dim: int, middle_dim: int, init: Initializer) -> None:
        self.down = Linear(dim, middle_dim, init)
        self.down.weight = init.normal((dim, middle_dim))
        self.up = Linear(middle_dim, dim, init)
        self.up.weight = init.zeros((middle_dim, dim))

    def forward(self, x: Value) -> Value:
        return self.up(T.gelu(self.down(x)))


def sequential_adapter(x: Value, adapter: Adapter) -> Value:
    """Residual bottleneck applied to the attention output."""
    return x + adapter(x)


def parallel_adapter(x: Value, adapter: Adapter, scaling: float, host_mlp: MLP, host_norm: LayerNorm) -> Value:
    """x + MLP(LN(x)) + s * Adapter(LN(x)), sharing the host block's norm."""
    h = host_norm(x)
    return x + (host_mlp(h) + adapter(h) * scaling)


# LoRA


def lora_linear(x: Value, weight: Value, bias: Value | None, lora_a: Value, lora_b: Value) -> Value:
    d, k = weight.shape
    if lora_a.shape[0] != d or lora_b.shape != (lora_a.shape[1], k):
        raise ConfigError(
            f"LoRA factors {lora_a.shape} x {lora_b.shape} do not fit a {weight.shape} projection"
        )
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y + (x @ lora_a) @ lora_b


def merge_lora(weight: np.ndarray, lora_a: np.ndarray, lora_b: np.ndarray) -> np.ndarray:
    return (weight + lora_a @ lora_b).astype(weight.dtype)


class LoRALinear(Linear):
    """A frozen projection plus a rank-r update; shares the wrapped layer's weight and bias."""

    def __init__(self, base: Linear, rank: int, init: Initializer) -> None:
        self.in_dim = base.in_dim
        self.out_dim = base.out_dim
        self.weight = base.weight
        self.bias = base.bias
        self.lora_a = init.normal((base.in_dim, rank))
        self.lora_b = init.zeros((rank, base.out_dim))
        self._base_weight: np.ndarray | None = None

    @property
    def merged(self) -> bool:
        return self._base_weight is not None

    def forward(self, x: Value) -> Value:
        if self.merged:
            return super().forward(x)
        return lora_linear(x, self.weight, self.bias, self.lora_a, self.lora_b)

    def merge(self) -> None:
        if self.merged:
            raise ContractError("LoRA update is already merged into this projection")
        self._base_weight = self.weight.data
        self.weight.data = merge_lora(self.weight.data, self.lora_a.data, self.lora_b.data)

    def unmerge(self) -> None:
        if not self.merged:
            raise ContractError("LoRA update is not merged into this projection")
        self.weight.data = self._base_weight
        self._base_weight = None


# model-level plumbing


def is_delta_name(name: str) -> bool:
    return any(part.startswith(DELTA_PREFIXES) for part in name.split("."))


def _lora_layers(model: Module) -> list[LoRALinear]:
    return [m for _, m in model.named_modules() if isinstance(m, LoRALinear)]


def freeze_mask(model: Module) -> FreezeMask:
    """Deltas plus the whole prompt/mask decoder train; the encoder base stays frozen."""
    names = [
        name
        for name, _ in model.named_parameters()
        if is_delta_name(name) or name.startswith(DECODER_PREFIXES)
    ]
    return FreezeMask(frozenset(names))


def attach_deltas(
    model: Module,
    adapter: AdapterConfig | None = None,
    lora: LoRAConfig | None = None,
    seed: int = 0,
    delta: DeltaSpec | None = None,
) -> tuple[Module, FreezeMask]:
    """
    Insert adapters and/or LoRA factors into every encoder block and freeze the base.

    Args:
        model (Module): A model with ``image_encoder.blocks``.
        adapter (AdapterConfig | None): Adapter settings, or None for no adapters.
        lora (LoRAConfig | None): LoRA settings, or None for no LoRA.
        seed (int): Seed for the delta initializers.
        delta (DeltaSpec | None): Adapter and LoRA settings together, instead of ``adapter`` and ``lora``.

    Returns:
        tuple[Module, FreezeMask]: The same model (modified in place) and its freeze mask.
    """
    if delta is not None:
        if adapter is not None or lora is not None:
            raise ContractError("pass either a DeltaSpec or adapter/lora settings, not both")
        adapter, lora = delta.adapter, delta.lora
    sample = next(iter(model.parameters()))
    init = Initializer(seed, materialize=getattr(model, "materialized", True), dtype=sample.dtype)

    for block in model.image_encoder.blocks:
        d = block.norm1.weight.shape[0]
        if adapter is not None:
            if block.adapter_attn is not None or block.adapter_mlp is not None:
                raise ContractError("adapters are already attached to this encoder")
            if "sequential" in adapter.placement:
                block.adapter_attn = Adapter(d, adapter.middle_dim, init)
            if "parallel" in adapter.placement:
                block.adapter_mlp = Adapter(d, adapter.middle_dim, init)
                block.adapter_scale = adapter.scaling
        if lora is not None:
            for target in lora.targets:
                layer = getattr(block.attn, target)
                if isinstance(layer, LoRALinear):
                    raise ContractError(f"LoRA is already attached to attn.{target}")
                setattr(block.attn, target, LoRALinear(layer, lora.rank, init))

    mask = freeze_mask(model)
    mask.apply(model)
    return model, mask


def merge_lora_weights(model: Module) -> int:
    """Fold every LoRA update into its projection in place; returns the number merged."""
    layers = _lora_layers(model)
    for layer in layers:
        layer.merge()
    return len(layers)


def unmerge_lora_weights(model: Module) -> int:
    layers = _lora_layers(model)
    for layer in layers:
        layer.unmerge()
    return len(layers)


def count_parameters(model: Module, which: str = "all") -> int:
    if which not in PARAMETER_FILTERS:
        raise ValueError(f"parameter filter must be one of {PARAMETER_FILTERS}, got {which!r}")
    total = 0
    for name, p in model.named_parameters():
        if which == "tunable" and not p.tunable:
            continue
        if which == "delta" and not is_delta_name(name):
            continue
        total += p.size
    return total


def parameter_table(model: Module) -> pd.DataFrame:
    """One row per parameter tensor: name, shape, count, tunable, delta."""
    rows = [
        {
            "name": name,
            "shape": "x".join(str(s) for s in p.shape),
            "count": p.size,
            "tunable": p.tunable,
            "delta": is_delta_name(name),
        }
        for name, p in model.named_parameters()
    ]
    return pd.DataFrame(rows, columns=["name", "shape", "count", "tunable", "delta"])
