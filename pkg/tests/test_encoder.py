import math

import numpy as np
import pytest

from src import tensor as T
from src.encoder import (
    EncoderConfig,
    ImageEncoder,
    Neck,
    PatchEmbed,
    ViTBlock,
    WindowAttention,
    add_absolute_positions,
    window_partition,
    window_unpartition,
)
from src.errors import ConfigError, ContractError, DimensionError
from src.layers import Initializer
from src.tensor import ComputationTape, Value


@pytest.fixture
def toy_config():
    return EncoderConfig.preset("vit_toy")


@pytest.fixture
def init():
    return Initializer(0)


def test_presets():
    assert EncoderConfig.preset("ViT-H").embed_dim == 1280
    assert EncoderConfig.preset("vit_l").depth == 24
    b = EncoderConfig.preset("vit_b")
    assert (b.num_heads, b.window_size, b.grid_size) == (12, 14, 28)
    with pytest.raises(ConfigError):
        EncoderConfig.preset("vit_xl")


def test_config_rejects_bad_head_split():
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, depth=1, num_heads=3)


def test_patch_embed_shapes(init):
    cfg = EncoderConfig(embed_dim=8, depth=1, num_heads=2, image_size=448)
    embed = PatchEmbed(cfg, init)
    assert embed(Value(np.zeros((1, 3, 448, 448), dtype=np.float32))).shape == (1, 28, 28, 8)
    assert embed(Value(np.zeros((1, 3, 64, 64), dtype=np.float32))).shape == (1, 4, 4, 8)


def test_patch_embed_zero_image_zero_bias(toy_config, init):
    out = PatchEmbed(toy_config, init)(Value(np.zeros((2, 3, 64, 64), dtype=np.float32)))
    assert not np.any(out.data)


def test_patch_embed_indivisible(toy_config, init):
    with pytest.raises(DimensionError):
        PatchEmbed(toy_config, init)(Value(np.zeros((1, 3, 60, 64), dtype=np.float32)))


def test_absolute_positions():
    rng = np.random.default_rng(1)
    grid = Value(rng.normal(size=(1, 4, 4, 8)))
    assert np.array_equal(add_absolute_positions(grid, Value(np.zeros((1, 4, 4, 8)))).data, grid.data)
    table = rng.normal(size=(1, 4, 4, 8))
    assert np.array_equal(add_absolute_positions(grid, Value(table)).data, grid.data + table)
    with pytest.raises(DimensionError):
        add_absolute_positions(grid, Value(np.zeros((1, 3, 4, 8))))


def test_absolute_positions_gradient():
    grid = Value(np.ones((1, 2, 2, 3)))
    table = Value(np.zeros((1, 2, 2, 3)), tunable=True)
    with ComputationTape() as tape:
        loss = (add_absolute_positions(grid, table) * 2.0).sum()
    tape.backward(loss)
    assert np.allclose(table.grad, 2.0)


@pytest.mark.parametrize("size,window,count", [(28, 14, 4), (14, 14, 1), (5, 2, 9)])
def test_window_partition_counts(size, window, count):
    x = Value(np.random.default_rng(2).normal(size=(1, size, size, 3)))
    windows, pad = window_partition(x, window)
    assert windows.shape == (count, window, window, 3)
    assert np.array_equal(window_unpartition(windows, pad, size, size).data, x.data)


def test_single_window_equals_input():
    x = Value(np.random.default_rng(3).normal(size=(1, 14, 14, 2)))
    windows, _ = window_partition(x, 14)
    assert np.array_equal(windows.data[0], x.data[0])


def test_partition_round_trip_random_shapes():
    rng = np.random.default_rng(4)
    for _ in range(20):
        b, h, w, c = rng.integers(1, 3), rng.integers(1, 12), rng.integers(1, 12), rng.integers(1, 4)
        window = int(rng.integers(1, 6))
        x = Value(rng.normal(size=(b, h, w, c)))
        windows, pad = window_partition(x, window)
        assert np.array_equal(window_unpartition(windows, pad, h, w).data, x.data)


def test_unpartition_inconsistent_pad_info():
    windows, pad = window_partition(Value(np.zeros((1, 5, 5, 1))), 2)
    with pytest.raises(ContractError):
        window_unpartition(windows, pad, 4, 4)


def test_attention_rows_sum_to_one(init):
    attn = WindowAttention(8, 2, 2, init)
    x = Value(np.random.default_rng(5).normal(size=(3, 2, 2, 8)).astype(np.float32))
    out, weights = attn(x, return_attention=True)
    assert out.shape == (3, 2, 2, 8)
    assert np.allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_token_window(init):
    attn = WindowAttention(4, 1, 1, init)
    x = Value(np.random.default_rng(6).normal(size=(2, 1, 1, 4)).astype(np.float32))
    out, weights = attn(x, return_attention=True)
    assert np.allclose(weights.data, 1.0)
    expected = attn.proj(attn.value(x.reshape(2, 1, 4))).data.reshape(2, 1, 1, 4)
    assert np.allclose(out.data, expected, atol=1e-6)


def test_attention_hand_computation(init):
    attn = WindowAttention(2, 1, 2, init)
    eye = np.eye(2, dtype=np.float64)
    for layer in (attn.query, attn.key, attn.value, attn.proj):
        layer.weight = Value(eye.copy())
        layer.bias = Value(np.zeros(2))
    attn.rel_pos = Value(np.zeros((1, 4, 4)))
    tokens = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    out = attn(Value(tokens.reshape(1, 2, 2, 2))).data.reshape(4, 2)

    scores = tokens @ tokens.T / math.sqrt(2)
    weights = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    assert np.allclose(out, weights @ tokens)


def test_attention_head_divisibility(init):
    with pytest.raises(ConfigError):
        WindowAttention(6, 4, 2, init)


def test_block_is_identity_with_zero_output_layers(toy_config, init):
    block = ViTBlock(toy_config, init)
    block.attn.proj.weight.data[:] = 0
    block.mlp.layers[-1].weight.data[:] = 0
    x = Value(np.random.default_rng(7).normal(size=(1, 4, 4, 64)).astype(np.float32))
    assert np.array_equal(block(x).data, x.data)


def test_block_preserves_shape_with_padding(init):
    cfg = EncoderConfig(embed_dim=16, depth=1, num_heads=2, window_size=3, image_size=80)
    block = ViTBlock(cfg, init)
    assert block(Value(np.ones((2, 5, 5, 16), dtype=np.float32))).shape == (2, 5, 5, 16)


def test_neck_shapes_and_zero_convs(toy_config, init):
    neck = Neck(toy_config, init)
    grid = Value(np.random.default_rng(8).normal(size=(1, 4, 4, 64)).astype(np.float32))
    assert neck(grid).shape == (1, 256, 4, 4)
    neck.conv1.data[:] = 0
    neck.conv2.data[:] = 0
    neck.norm2.bias.data[:] = np.arange(256)
    out = neck(grid).data
    assert np.allclose(out, np.arange(256).reshape(1, 256, 1, 1))


def test_encoder_forward_shapes_and_determinism(toy_config, init):
    encoder = ImageEncoder(toy_config, init)
    images = Value(np.random.default_rng(9).uniform(size=(2, 3, 64, 64)).astype(np.float32))
    a = encoder(images).data
    b = encoder(images).data
    assert a.shape == (2, 256, 4, 4)
    assert np.array_equal(a, b)


def test_encoder_448_geometry():
    cfg = EncoderConfig(embed_dim=8, depth=1, num_heads=2, image_size=448)
    encoder = ImageEncoder(cfg, Initializer(1))
    out = encoder(Value(np.zeros((1, 3, 448, 448), dtype=np.float32)))
    assert out.shape == (1, 256, 28, 28)


def test_block_stack_identity_when_outputs_zeroed(toy_config, init):
    encoder = ImageEncoder(toy_config, init)
    for block in encoder.blocks:
        block.attn.proj.weight.data[:] = 0
        block.mlp.layers[-1].weight.data[:] = 0
    x = Value(np.random.default_rng(10).normal(size=(1, 4, 4, 64)).astype(np.float32))
    y = x
    for block in encoder.blocks:
        y = block(y)
    assert np.array_equal(y.data, x.data)


def test_block_gradients_float64(toy_config):
    from src.gradcheck import check_gradients

    block = ViTBlock(toy_config, Initializer(11, dtype=np.float64))
    block.attn.rel_pos.data[:] = np.random.default_rng(12).normal(scale=0.1, size=block.attn.rel_pos.shape)
    x = Value(np.random.default_rng(13).normal(size=(1, 4, 4, 64)))
    w = Value(np.random.default_rng(14).normal(size=(1, 4, 4, 64)))
    params = block.parameter_dict()
    report = check_gradients(lambda: (block(x) * w).sum(), params, entries_per_param=3)
    assert report.max_error < 1e-3
