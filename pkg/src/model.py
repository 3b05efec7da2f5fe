from __future__ import annotations

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, MaskDecoder, PromptEncoder
from .encoder import EncoderConfig, ImageEncoder
from .errors import ConfigError, DimensionError
from .layers import Initializer, Module
from .tensor import Value
from .train import binarize


class CrackSAM(Module):
    """Windowed ViT encoder, dense default prompt and two-way mask decoder."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        init: Initializer,
    ) -> None:
        if decoder_config.token_dim != encoder_config.neck_dim:
            raise ConfigError(
                f"decoder token_dim {decoder_config.token_dim} must equal encoder neck_dim {encoder_config.neck_dim}"
            )
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.materialized = init.materialize
        self.image_encoder = ImageEncoder(encoder_config, init)
        self.prompt_encoder = PromptEncoder(decoder_config, encoder_config.grid_size, init)
        self.mask_decoder = MaskDecoder(decoder_config, init)

    def forward(self, images) -> Value:
        """(B, 3, H, W) images in [0, 1] -> (B, num_class, H, W) logits."""
        if not isinstance(images, Value):
            images = T.constant(np.asarray(images), like=self.mask_decoder.mask_tokens)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected a (B, 3, H, W) image batch, got {images.shape}")
        embedding = self.image_encoder(images)
        return self.mask_decoder(embedding, self.prompt_encoder, images.shape[-2:])

    def probabilities(self, images) -> np.ndarray:
        """Per-pixel softmax over classes, (B, num_class, H, W)."""
        logits = self.forward(images).data
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    def predict(self, images, threshold: float = 0.5, mode: str = "threshold") -> np.ndarray:
        """Binary crack masks (B, H, W); channel 1 is the crack class."""
        probs = self.probabilities(images)
        if mode == "argmax":
            return binarize(probs, mode="argmax")
        return binarize(probs[:, 1], threshold)


def build_model(
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig | None = None,
    seed: int = 0,
    materialize: bool = True,
    dtype=T.DEFAULT_DTYPE,
) -> CrackSAM:
    """
    Build a CrackSAM model with deterministic initialization.

    Args:
        encoder_config (EncoderConfig): Encoder architecture.
        decoder_config (DecoderConfig | None): Decoder architecture; defaults sized to the encoder neck.
        seed (int): Initializer seed; the same seed always rebuilds the same base weights.
        materialize (bool): When False, parameters are shape-only placeholders.
        dtype: Parameter dtype.

    Returns:
        CrackSAM: The model, with every parameter tunable until deltas are attached.
    """
    if decoder_config is None:
        decoder_config = DecoderConfig(token_dim=encoder_config.neck_dim)
    init = Initializer(seed, materialize=materialize, dtype=dtype)
    return CrackSAM(encoder_config, decoder_config, init)
