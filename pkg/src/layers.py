from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Value


class Initializer:
    """
    Deterministic parameter factory.

    With ``materialize=False`` every parameter is a zero-stride placeholder of
    the right shape, so large layouts can be enumerated without allocating.
    """

    def __init__(
        self,
        seed: int | np.random.Generator = 0,
        materialize: bool = True,
        dtype=T.DEFAULT_DTYPE,
        std: float = 0.02,
    ) -> None:
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.materialize = materialize
        self.dtype = dtype
        self.std = std

    def _placeholder(self, shape) -> Value:
        return Value(np.broadcast_to(np.zeros((), dtype=self.dtype), shape), tunable=True)

    def trunc_normal(self, shape, std: float | None = None) -> Value:
        if not self.materialize:
            return self._placeholder(shape)
        std = self.std if std is None else std
        data = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=self.rng)
        return Value(np.asarray(data, dtype=self.dtype), tunable=True)

    def normal(self, shape, std: float | None = None) -> Value:
        if not self.materialize:
            return self._placeholder(shape)
        std = self.std if std is None else std
        return Value((self.rng.standard_normal(shape) * std).astype(self.dtype), tunable=True)

    def zeros(self, shape) -> Value:
        if not self.materialize:
            return self._placeholder(shape)
        return Value(np.zeros(shape, dtype=self.dtype), tunable=True)

    def ones(self, shape) -> Value:
        if not self.materialize:
            return self._placeholder(shape)
        return Value(np.ones(shape, dtype=self.dtype), tunable=True)


class Module:
    """Container that names its parameters by attribute path (``blocks.0.attn.query.weight``)."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, attr in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(attr, (Value, Module)):
                yield key, attr
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for key, attr in self._children():
            if isinstance(attr, Value):
                yield f"{prefix}{key}", attr
            else:
                yield from attr.named_parameters(f"{prefix}{key}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, attr in self._children():
            if isinstance(attr, Module):
                yield from attr.named_modules(f"{prefix}{key}.")

    def parameters(self) -> list[Value]:
        return [p for _, p in self.named_parameters()]

    def parameter_dict(self) -> dict[str, Value]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_tunable(self, flag: bool) -> None:
        for p in self.parameters():
            p.tunable = flag

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = np.array(p.data, dtype=dtype)
            p.grad = None
        return self


class Linear(Module):
    """Row-vector linear layer, ``y = x @ weight + bias`` with weight shaped (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, init: Initializer, bias: bool = True) -> None:
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = init.trunc_normal((in_dim, out_dim))
        self.bias = init.zeros((out_dim,)) if bias else None

    def forward(self, x: Value) -> Value:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, init: Initializer) -> None:
        self.weight = init.ones((dim,))
        self.bias = init.zeros((dim,))

    def forward(self, x: Value) -> Value:
        return T.layer_norm(x, self.weight, self.bias, T.LN_EPS)


class LayerNorm2d(LayerNorm):
    """Channel layer norm for (B, C, H, W) feature maps."""

    def forward(self, x: Value) -> Value:
        y = T.layer_norm(x.transpose(0, 2, 3, 1), self.weight, self.bias, T.LN_EPS)
        return y.transpose(0, 3, 1, 2)


class MLP(Module):
    """Stack of linear layers with GELU between them (not after the last)."""

    def __init__(self, dims: list[int], init: Initializer) -> None:
        self.layers = [Linear(a, b, init) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Value) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x
