"""
Dense float arrays with tape-based reverse-mode differentiation.

A ``Value`` wraps a row-major numpy array together with an optional gradient
slot and a ``tunable`` flag. Operations executed while a ``ComputationTape``
is active are recorded whenever at least one of their inputs requires a
gradient::

    with ComputationTape() as tape:
        loss = model_loss(batch)
    tape.backward(loss)

Outside a tape nothing is recorded, which is how inference runs. The active
tape lives in a context variable, so concurrent threads each see their own.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6
BICUBIC_A = -0.75

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Value:
    """A dense float array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, tunable: bool = False, name: str | None = None) -> None:
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tunable = tunable
        self.name = name
        self._tracked = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.tunable or self._tracked

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, dtype={self.dtype}, tunable={self.tunable}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def constant(data, like: Value | None = None) -> Value:
    """Wrap ``data`` as a non-tunable value, cast to ``like``'s dtype when given."""
    if isinstance(data, Value):
        return data
    dtype = like.dtype if like is not None else None
    arr = np.asarray(data, dtype=dtype)
    return Value(arr)


def _pair(a, b) -> tuple[Value, Value]:
    if isinstance(a, Value) and not isinstance(b, Value):
        return a, constant(b, like=a)
    if isinstance(b, Value) and not isinstance(a, Value):
        return constant(a, like=b), b
    return a, b


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Value
    vjps: tuple


class ComputationTape:
    """Ordered record of executed primitives, replayed in reverse by ``backward``."""

    def __init__(self) -> None:
        self.records: list[TapeRecord] = []
        self._token = None

    def __enter__(self) -> "ComputationTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Value], output: Value, vjps: Sequence) -> None:
        self.records.append(TapeRecord(op, tuple(inputs), output, tuple(vjps)))

    def backward(self, loss: Value) -> list[Value]:
        """
        Propagate d(loss)/d(value) to every tunable leaf reachable from ``loss``.

        Gradients accumulate into ``Value.grad``; frozen values are never written.

        Returns:
            list[Value]: The tunable leaves that received a gradient.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a single-element loss, got shape {loss.shape}")
        if not self.records:
            raise ContractError("backward called on an empty tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Value] = {}
        if loss.tunable:
            leaves[id(loss)] = loss

        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, vjp in zip(rec.inputs, rec.vjps):
                if vjp is None or not inp.requires_grad:
                    continue
                gi = vjp(g)
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp.tunable:
                    leaves[key] = inp

        assigned = []
        for key, leaf in leaves.items():
            g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            assigned.append(leaf)
        return assigned


def backward(loss: Value, tape: ComputationTape | None = None) -> list[Value]:
    """Run ``tape.backward(loss)`` on the given tape or the active one."""
    tape = tape if tape is not None else _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward called without a computation tape")
    return tape.backward(loss)


def _emit(op: str, inputs: Sequence[Value], data: np.ndarray, vjps: Sequence) -> Value:
    out = Value(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(v.requires_grad for v in inputs):
        out._tracked = True
        tape.record(op, inputs, out, vjps)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise


def add(a, b) -> Value:
    a, b = _pair(a, b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Value:
    a, b = _pair(a, b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Value:
    a, b = _pair(a, b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Value:
    a, b = _pair(a, b)
    return _emit(
        "div",
        (a, b),
        a.data / b.data,
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(x: Value) -> Value:
    return _emit("neg", (x,), -x.data, (lambda g: -g,))


def exp(x: Value) -> Value:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, (lambda g: g * out,))


def log(x: Value) -> Value:
    return _emit("log", (x,), np.log(x.data), (lambda g: g / x.data,))


def clip(x: Value, lo: float, hi: float) -> Value:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", (x,), np.clip(x.data, lo, hi), (lambda g: g * inside,))


def gelu(x: Value) -> Value:
    """Exact GELU, x * Phi(x) with the Gaussian CDF written through erf."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
    out = (x.data * cdf).astype(x.dtype)
    return _emit("gelu", (x,), out, (lambda g: (g * (cdf + x.data * pdf)).astype(x.dtype),))


# reductions and shape plumbing


def sum_(x: Value, axis=None, keepdims: bool = False) -> Value:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            g = np.expand_dims(g, tuple(sorted(axes)))
        return np.broadcast_to(g, x.shape).copy()

    return _emit("sum", (x,), np.asarray(out), (vjp,))


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Value, shape: tuple) -> Value:
    return _emit("reshape", (x,), x.data.reshape(shape), (lambda g: g.reshape(x.shape),))


def transpose(x: Value, axes: tuple) -> Value:
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose",
        (x,),
        np.ascontiguousarray(x.data.transpose(axes)),
        (lambda g: g.transpose(inverse),),
    )


def getitem(x: Value, index) -> Value:
    """Basic (slice/integer) indexing."""

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[index] += g
        return gx

    return _emit("getitem", (x,), np.ascontiguousarray(x.data[index]), (vjp,))


def pad(x: Value, pad_width: Sequence[tuple[int, int]]) -> Value:
    """Zero padding; ``pad_width`` follows ``numpy.pad``."""
    pad_width = tuple(tuple(p) for p in pad_width)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return _emit("pad", (x,), np.pad(x.data, pad_width), (lambda g: g[crop],))


def expand(x: Value, shape: tuple) -> Value:
    return _emit(
        "expand",
        (x,),
        np.broadcast_to(x.data, shape).copy(),
        (lambda g: _unbroadcast(g, x.shape),),
    )


def concatenate(values: Sequence[Value], axis: int = 0) -> Value:
    values = tuple(values)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def make_vjp(i):
        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(index)]

        return vjp

    return _emit(
        "concatenate",
        values,
        np.concatenate([v.data for v in values], axis=axis),
        tuple(make_vjp(i) for i in range(len(values))),
    )


# linear algebra and normalization


def matmul(a, b) -> Value:
    """Batched matrix product with numpy broadcasting over leading dimensions."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ")
    return _emit(
        "matmul",
        (a, b),
        np.matmul(a.data, b.data),
        (
            lambda g: _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            lambda g: _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        ),
    )


def softmax(x: Value, axis: int = -1) -> Value:
    if np.isnan(x.data).any():
        raise NumericError(f"softmax received NaN input of shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - np.sum(g * out, axis=axis, keepdims=True))

    return _emit("softmax", (x,), out, (vjp,))


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = LN_EPS) -> Value:
    """Normalize over the last dimension, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def grad_x(g):
        dxhat = g * gain.data
        return rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )

    return _emit(
        "layer_norm",
        (x, gain, bias),
        out.astype(x.dtype),
        (grad_x, lambda g: (g * xhat).sum(axis=lead), lambda g: g.sum(axis=lead)),
    )


# image operators, layout (B, C, H, W)


def _check_image(x: Value, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a (B, C, H, W) input, got shape {x.shape}")


def conv2d(x: Value, kernel: Value, stride: int = 1, padding: int = 0) -> Value:
    """Cross-correlation of (B, C, H, W) with an (O, C, k, k) kernel."""
    _check_image(x, "conv2d")
    batch, channels, height, width = x.shape
    out_ch, k_ch, kh, kw = kernel.shape
    if k_ch != channels:
        raise DimensionError(f"conv2d: input {x.shape} has {channels} channels, kernel {kernel.shape} expects {k_ch}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = height + 2 * padding, width + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: padded input {hp}x{wp} is smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    rows = slice(0, (ho - 1) * stride + 1, stride)
    cols = slice(0, (wo - 1) * stride + 1, stride)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, rows, cols]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def grad_x(g):
        gwin = np.tensordot(g, kernel.data, axes=([1], [0]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                    gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return gxp[:, :, p : p + height, p : p + width]

    def grad_kernel(g):
        return np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))

    return _emit("conv2d", (x, kernel), out, (grad_x, grad_kernel))


def transposed_conv2d(x: Value, kernel: Value, stride: int = 1) -> Value:
    """Adjoint of ``conv2d``: (B, Cin, H, W) with a (Cin, Cout, k, k) kernel."""
    _check_image(x, "transposed_conv2d")
    batch, in_ch, height, width = x.shape
    k_ch, out_ch, kh, kw = kernel.shape
    if k_ch != in_ch:
        raise DimensionError(
            f"transposed_conv2d: input {x.shape} has {in_ch} channels, kernel {kernel.shape} expects {k_ch}"
        )
    if stride < 1:
        raise DimensionError(f"transposed_conv2d: stride must be >= 1, got {stride}")
    ho, wo = (height - 1) * stride + kh, (width - 1) * stride + kw

    def tap(i, j):
        return (
            slice(None),
            slice(None),
            slice(i, i + (height - 1) * stride + 1, stride),
            slice(j, j + (width - 1) * stride + 1, stride),
        )

    out = np.zeros((batch, out_ch, ho, wo), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        for j in range(kw):
            out[tap(i, j)] += np.tensordot(x.data, kernel.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)

    def grad_x(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx += np.tensordot(g[tap(i, j)], kernel.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
        return gx

    def grad_kernel(g):
        gk = np.zeros(kernel.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gk[:, :, i, j] = np.tensordot(x.data, g[tap(i, j)], axes=([0, 2, 3], [0, 2, 3]))
        return gk

    return _emit("transposed_conv2d", (x, kernel), out, (grad_x, grad_kernel))


def interpolation_matrix(src: int, dst: int, mode: str = "bilinear") -> np.ndarray:
    """
    Row i holds the weights sampling output pixel i from ``src`` input pixels.

    Half-pixel centers: output pixel i maps to input coordinate
    (i + 0.5) * src / dst - 0.5. Indices are clamped at the borders.
    """
    centers = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    weights = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    if mode == "bilinear":
        c = np.maximum(centers, 0.0)
        x0 = np.minimum(np.floor(c).astype(int), src - 1)
        x1 = np.minimum(x0 + 1, src - 1)
        frac = c - x0
        np.add.at(weights, (rows, x0), 1.0 - frac)
        np.add.at(weights, (rows, x1), frac)
    elif mode == "bicubic":
        x0 = np.floor(centers).astype(int)
        t = centers - x0
        a = BICUBIC_A
        w_m1 = ((a * (t + 1) - 5 * a) * (t + 1) + 8 * a) * (t + 1) - 4 * a
        w_0 = ((a + 2) * t - (a + 3)) * t * t + 1
        w_1 = ((a + 2) * (1 - t) - (a + 3)) * (1 - t) * (1 - t) + 1
        w_2 = 1.0 - w_m1 - w_0 - w_1
        for offset, w in zip((-1, 0, 1, 2), (w_m1, w_0, w_1, w_2)):
            np.add.at(weights, (rows, np.clip(x0 + offset, 0, src - 1)), w)
    else:
        raise ValueError(f"resize mode must be 'bilinear' or 'bicubic', got {mode!r}")
    return weights


def resize(x: Value, target_h: int, target_w: int, mode: str = "bilinear") -> Value:
    """Separable bilinear/bicubic resampling of the last two axes."""
    if target_h < 1 or target_w < 1:
        raise DimensionError(f"resize: target {target_h}x{target_w} must be at least 1x1")
    height, width = x.shape[-2:]
    if (height, width) == (target_h, target_w):
        return x
    rh = interpolation_matrix(height, target_h, mode).astype(x.dtype)
    rw = interpolation_matrix(width, target_w, mode).astype(x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return _emit("resize", (x,), out, (lambda g: np.matmul(np.matmul(rh.T, g), rw),))
