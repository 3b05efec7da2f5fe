"""
Prompt-free mask decoder.

The image embedding gets a learnable dense default added (no point, box or
mask prompts), passes through a two-way transformer together with one mask
token per class, is upsampled 4x by two transposed convolutions, resized to
full resolution and finally classified per pixel by the hypernetwork rows
produced from the mask tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import MLP, Initializer, LayerNorm, LayerNorm2d, Linear, Module
from .tensor import Value


@dataclass(frozen=True)
class DecoderConfig:
    token_dim: int = 256
    num_class: int = 2
    two_way_depth: int = 2
    num_heads: int = 8
    mlp_dim: int = 1024
    upsample_channels: tuple[int, int] = (64, 32)

    def __post_init__(self) -> None:
        if self.num_class < 2:
            raise ConfigError(f"num_class must be >= 2, got {self.num_class}")
        if self.two_way_depth < 1:
            raise ConfigError(f"two_way_depth must be >= 1, got {self.two_way_depth}")
        if self.token_dim % self.num_heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by num_heads {self.num_heads}")
        if len(self.upsample_channels) != 2 or min(self.upsample_channels) < 1:
            raise ConfigError(f"upsample_channels must be two positive ints, got {self.upsample_channels}")

    @property
    def classifier_dim(self) -> int:
        return self.upsample_channels[-1]


class PromptEncoder(Module):
    """Dense default prompt plus the decoder's positional table for the embedding grid."""

    def __init__(self, config: DecoderConfig, grid_size: int, init: Initializer) -> None:
        self.dense_default = init.trunc_normal((config.token_dim,))
        self.positional = init.normal((config.token_dim, grid_size, grid_size), std=1.0)

    def forward(self, embedding: Value) -> Value:
        return apply_default_prompt(embedding, self)


def apply_default_prompt(embedding: Value, prompt: PromptEncoder) -> Value:
    """Add ``dense_default`` to every spatial position of a (B, C, h, w) embedding."""
    channels = embedding.shape[1]
    if prompt.dense_default.shape != (channels,):
        raise DimensionError(
            f"dense default {prompt.dense_default.shape} does not match embedding channels {channels}"
        )
    return embedding + prompt.dense_default.reshape(1, channels, 1, 1)


class Attention(Module):
    """Multi-head attention with separate query/key/value inputs, (B, N, C) layout."""

    def __init__(self, dim: int, num_heads: int, init: Initializer) -> None:
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = Linear(dim, dim, init)
        self.k_proj = Linear(dim, dim, init)
        self.v_proj = Linear(dim, dim, init)
        self.out_proj = Linear(dim, dim, init)

    def _split(self, x: Value) -> Value:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, q: Value, k: Value, v: Value) -> Value:
        b, n, c = q.shape
        q = self._split(self.q_proj(q))
        k = self._split(self.k_proj(k))
        v = self._split(self.v_proj(v))
        attn = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim)), axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
        return self.out_proj(out)


class TwoWayBlock(Module):
    def __init__(self, config: DecoderConfig, init: Initializer) -> None:
        d = config.token_dim
        self.self_attn = Attention(d, config.num_heads, init)
        self.norm1 = LayerNorm(d, init)
        self.cross_attn_token_to_image = Attention(d, config.num_heads, init)
        self.norm2 = LayerNorm(d, init)
        self.mlp = MLP([d, config.mlp_dim, d], init)
        self.norm3 = LayerNorm(d, init)
        self.cross_attn_image_to_token = Attention(d, config.num_heads, init)
        self.norm4 = LayerNorm(d, init)

    def forward(self, queries: Value, keys: Value, query_pe: Value, key_pe: Value) -> tuple[Value, Value]:
        """
        One round of token/image exchange.

        Args:
            queries (Value): (B, T, C) mask tokens.
            keys (Value): (B, N, C) flattened image embedding.
            query_pe (Value): (T, C) initial token embeddings, re-added before each attention.
            key_pe (Value): (N, C) positional table of the image grid.

        Returns:
            tuple[Value, Value]: Updated tokens and image embedding, same shapes.
        """
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))

        q = queries + query_pe
        k = keys + key_pe
        queries = self.norm2(queries + self.cross_attn_token_to_image(q, k, keys))

        queries = self.norm3(queries + self.mlp(queries))

        q = queries + query_pe
        k = keys + key_pe
        keys = self.norm4(keys + self.cross_attn_image_to_token(k, q, queries))
        return queries, keys


def two_way_block(tokens: Value, image_emb: Value, positional: Value, block: TwoWayBlock) -> tuple[Value, Value]:
    """Run ``block`` on a single (T, C) token set and a (C, h, w) embedding."""
    c, h, w = image_emb.shape
    keys = image_emb.reshape(1, c, h * w).transpose(0, 2, 1)
    key_pe = positional.reshape(c, h * w).transpose(1, 0)
    queries, keys = block(tokens.reshape(1, *tokens.shape), keys, tokens, key_pe)
    return queries.reshape(*tokens.shape), keys.transpose(0, 2, 1).reshape(c, h, w)


class Upscaler(Module):
    """ConvT(2, s2) -> LN2d -> GELU -> ConvT(2, s2) -> GELU."""

    def __init__(self, config: DecoderConfig, init: Initializer) -> None:
        c1, c2 = config.upsample_channels
        self.conv1 = init.trunc_normal((config.token_dim, c1, 2, 2))
        self.bias1 = init.zeros((c1,))
        self.norm = LayerNorm2d(c1, init)
        self.conv2 = init.trunc_normal((c1, c2, 2, 2))
        self.bias2 = init.zeros((c2,))

    def forward(self, x: Value) -> Value:
        x = T.transposed_conv2d(x, self.conv1, stride=2) + self.bias1.reshape(1, -1, 1, 1)
        x = T.gelu(self.norm(x))
        x = T.transposed_conv2d(x, self.conv2, stride=2) + self.bias2.reshape(1, -1, 1, 1)
        return T.gelu(x)


def upsample_embedding(image_emb: Value, upscaler: Upscaler) -> Value:
    return upscaler(image_emb)


def predict_masks(classifier: Value, upsampled: Value, full_res: tuple[int, int]) -> Value:
    """
    Resize the (B, K, 4h, 4w) features to full resolution, then take the per-pixel
    inner product with each class's (B, num_class, K) classifier row.
    """
    height, width = full_res
    batch, channels = upsampled.shape[:2]
    if classifier.shape[0] != batch or classifier.shape[-1] != channels:
        raise DimensionError(f"classifier {classifier.shape} does not fit features {upsampled.shape}")
    features = T.resize(upsampled, height, width, "bilinear")
    logits = classifier @ features.reshape(batch, channels, height * width)
    return logits.reshape(batch, classifier.shape[1], height, width)


class MaskDecoder(Module):
    def __init__(self, config: DecoderConfig, init: Initializer) -> None:
        self.config = config
        d = config.token_dim
        self.mask_tokens = init.normal((config.num_class, d), std=1.0)
        self.blocks = [TwoWayBlock(config, init) for _ in range(config.two_way_depth)]
        self.final_attn_token_to_image = Attention(d, config.num_heads, init)
        self.norm_final = LayerNorm(d, init)
        self.upscaler = Upscaler(config, init)
        self.hypernetworks = [MLP([d, d, d, config.classifier_dim], init) for _ in range(config.num_class)]

    def forward(self, image_emb: Value, prompt: PromptEncoder, full_res: tuple[int, int]) -> Value:
        """(B, C, h, w) embedding -> (B, num_class, H, W) logits."""
        src = apply_default_prompt(image_emb, prompt)
        batch, c, h, w = src.shape
        if prompt.positional.shape != (c, h, w):
            raise DimensionError(f"positional table {prompt.positional.shape} does not match embedding {src.shape}")

        keys = src.reshape(batch, c, h * w).transpose(0, 2, 1)
        key_pe = prompt.positional.reshape(c, h * w).transpose(1, 0)
        tokens = self.mask_tokens
        queries = T.expand(tokens, (batch, *tokens.shape))
        for block in self.blocks:
            queries, keys = block(queries, keys, tokens, key_pe)

        attn_out = self.final_attn_token_to_image(queries + tokens, keys + key_pe, keys)
        queries = self.norm_final(queries + attn_out)

        src = keys.transpose(0, 2, 1).reshape(batch, c, h, w)
        upsampled = upsample_embedding(src, self.upscaler)
        rows = [mlp(queries[:, i : i + 1, :]) for i, mlp in enumerate(self.hypernetworks)]
        return predict_masks(T.concatenate(rows, axis=1), upsampled, full_res)
