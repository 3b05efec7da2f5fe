"""
Windowed ViT image encoder: patch embedding, absolute positions, a stack of
window-attention blocks and the convolutional neck.

Token grids are laid out (B, H, W, C); feature maps entering or leaving
convolutions are (B, C, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .layers import MLP, Initializer, LayerNorm, LayerNorm2d, Linear, Module
from .peft import parallel_adapter, sequential_adapter
from .tensor import Value

# name -> (embed_dim, depth, num_heads)
PRESETS = {
    "vit_b": (768, 12, 12),
    "vit_l": (1024, 24, 16),
    "vit_h": (1280, 32, 16),
    "vit_toy": (64, 2, 4),
}


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int
    depth: int
    num_heads: int
    window_size: int = 14
    patch_size: int = 16
    neck_dim: int = 256
    image_size: int = 448
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        for field_name in ("embed_dim", "depth", "num_heads", "window_size", "patch_size", "neck_dim", "image_size"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive, got {getattr(self, field_name)}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @classmethod
    def preset(cls, name: str, image_size: int | None = None, window_size: int | None = None) -> "EncoderConfig":
        """ViT-B/L/H use window 14 at 448 px; the toy preset uses window 2 at 64 px."""
        key = name.lower().replace("-", "_")
        if key not in PRESETS:
            raise ConfigError(f"unknown encoder preset {name!r}; expected one of {sorted(PRESETS)}")
        embed_dim, depth, heads = PRESETS[key]
        default_window, default_size = (2, 64) if key == "vit_toy" else (14, 448)
        return cls(
            embed_dim=embed_dim,
            depth=depth,
            num_heads=heads,
            window_size=window_size or default_window,
            image_size=image_size or default_size,
        )


@dataclass(frozen=True)
class PadInfo:
    window: int
    padded_h: int
    padded_w: int
    height: int
    width: int


def window_partition(x: Value, window: int) -> tuple[Value, PadInfo]:
    """
    Split a (B, H, W, C) grid into (B * N, w, w, C) non-overlapping windows.

    Grids that are not a multiple of ``window`` are zero-padded bottom/right first.
    """
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    batch, height, width, channels = x.shape
    pad_h = (window - height % window) % window
    pad_w = (window - width % window) % window
    if pad_h or pad_w:
        x = T.pad(x, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    hp, wp = height + pad_h, width + pad_w
    x = x.reshape(batch, hp // window, window, wp // window, window, channels)
    windows = x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, window, window, channels)
    return windows, PadInfo(window, hp, wp, height, width)


def window_unpartition(windows: Value, pad_info: PadInfo, height: int, width: int) -> Value:
    """Reassemble windows into a (B, H, W, C) grid, dropping any padding."""
    w = pad_info.window
    if (height, width) != (pad_info.height, pad_info.width) or tuple(windows.shape[1:3]) != (w, w):
        raise ContractError(
            f"windows {windows.shape} / target {height}x{width} do not match pad info {pad_info}"
        )
    rows, cols = pad_info.padded_h // w, pad_info.padded_w // w
    if windows.shape[0] % (rows * cols):
        raise ContractError(f"{windows.shape[0]} windows cannot tile a {rows}x{cols} window grid")
    batch = windows.shape[0] // (rows * cols)
    channels = windows.shape[-1]
    x = windows.reshape(batch, rows, cols, w, w, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(batch, pad_info.padded_h, pad_info.padded_w, channels)
    if pad_info.padded_h > height or pad_info.padded_w > width:
        x = x[:, :height, :width, :]
    return x


class PatchEmbed(Module):
    def __init__(self, config: EncoderConfig, init: Initializer) -> None:
        p = config.patch_size
        self.patch_size = p
        self.weight = init.trunc_normal((config.embed_dim, 3, p, p))
        self.bias = init.zeros((config.embed_dim,))

    def forward(self, images: Value) -> Value:
        """(B, 3, H, W) image in [0, 1] -> (B, H/p, W/p, d) token grid."""
        height, width = images.shape[-2:]
        if height % self.patch_size or width % self.patch_size:
            raise DimensionError(
                f"image {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        x = T.conv2d(images, self.weight, stride=self.patch_size)
        x = x + self.bias.reshape(1, -1, 1, 1)
        return x.transpose(0, 2, 3, 1)


def add_absolute_positions(grid: Value, pos_table: Value) -> Value:
    if tuple(pos_table.shape[-3:]) != tuple(grid.shape[-3:]):
        raise DimensionError(f"position table {pos_table.shape} does not match token grid {grid.shape}")
    return grid + pos_table


class WindowAttention(Module):
    """Multi-head self-attention inside each window with a learnable additive position bias."""

    def __init__(self, dim: int, num_heads: int, window: int, init: Initializer) -> None:
        if dim % num_heads:
            raise ConfigError(f"dim {dim} is not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = Linear(dim, dim, init)
        self.key = Linear(dim, dim, init)
        self.value = Linear(dim, dim, init)
        self.proj = Linear(dim, dim, init)
        # one (w^2, w^2) table per head, shared by every window of the block
        self.rel_pos = init.zeros((num_heads, window * window, window * window))

    def _split_heads(self, x: Value, n_win: int, n_tok: int) -> Value:
        return x.reshape(n_win, n_tok, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Value, return_attention: bool = False):
        n_win, wh, ww, channels = x.shape
        if channels != self.dim:
            raise DimensionError(f"window attention expects {self.dim} channels, got {channels}")
        n_tok = wh * ww
        tokens = x.reshape(n_win, n_tok, channels)
        q = self._split_heads(self.query(tokens), n_win, n_tok)
        k = self._split_heads(self.key(tokens), n_win, n_tok)
        v = self._split_heads(self.value(tokens), n_win, n_tok)

        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores + self.rel_pos, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(n_win, n_tok, channels)
        out = self.proj(out).reshape(n_win, wh, ww, channels)
        if return_attention:
            return out, attn
        return out


class ViTBlock(Module):
    """Pre-norm block: x + WindowAttn(LN(x)), then x + MLP(LN(x)); optional adapters."""

    def __init__(self, config: EncoderConfig, init: Initializer) -> None:
        d = config.embed_dim
        self.window_size = config.window_size
        self.norm1 = LayerNorm(d, init)
        self.attn = WindowAttention(d, config.num_heads, config.window_size, init)
        self.norm2 = LayerNorm(d, init)
        self.mlp = MLP([d, config.mlp_ratio * d, d], init)
        self.adapter_attn = None
        self.adapter_mlp = None
        self.adapter_scale = 0.0

    def forward(self, x: Value) -> Value:
        _, height, width, _ = x.shape
        shortcut = x
        windows, pad_info = window_partition(self.norm1(x), self.window_size)
        y = window_unpartition(self.attn(windows), pad_info, height, width)
        if self.adapter_attn is not None:
            y = sequential_adapter(y, self.adapter_attn)
        x = shortcut + y
        if self.adapter_mlp is not None:
            return parallel_adapter(x, self.adapter_mlp, self.adapter_scale, self.mlp, self.norm2)
        return x + self.mlp(self.norm2(x))


class Neck(Module):
    """1x1 conv -> LN -> 3x3 conv -> LN, reducing d channels to neck_dim."""

    def __init__(self, config: EncoderConfig, init: Initializer) -> None:
        n = config.neck_dim
        self.conv1 = init.trunc_normal((n, config.embed_dim, 1, 1))
        self.norm1 = LayerNorm2d(n, init)
        self.conv2 = init.trunc_normal((n, n, 3, 3))
        self.norm2 = LayerNorm2d(n, init)

    def forward(self, grid: Value) -> Value:
        x = grid.transpose(0, 3, 1, 2)
        x = self.norm1(T.conv2d(x, self.conv1))
        return self.norm2(T.conv2d(x, self.conv2, padding=1))


class ImageEncoder(Module):
    def __init__(self, config: EncoderConfig, init: Initializer) -> None:
        self.config = config
        g = config.grid_size
        self.patch_embed = PatchEmbed(config, init)
        self.pos_embed = init.trunc_normal((1, g, g, config.embed_dim))
        self.blocks = [ViTBlock(config, init) for _ in range(config.depth)]
        self.neck = Neck(config, init)

    def forward(self, images: Value) -> Value:
        """(B, 3, H, W) -> (B, neck_dim, H/16, W/16) image embedding."""
        x = add_absolute_positions(self.patch_embed(images), self.pos_embed)
        for block in self.blocks:
            x = block(x)
        return self.neck(x)
