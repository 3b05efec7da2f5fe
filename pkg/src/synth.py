from __future__ import annotations

import os

import numpy as np
from PIL import Image, ImageDraw

from .base import CrackSAMBase
from .dataset import IMAGE_DIR, MASK_DIR, DatasetManifest, SampleRecord, write_image, write_mask
from .utils import is_valid_split

CRACK_FREE_RATE = 0.1
MAX_POSITIVE_FRACTION = 0.099  # strictly below 10% of the pixels
MAX_CRACKS = 3
WIDTH_RANGE = (1, 5)
STEP_RANGE = (2.0, 4.0)  # px per random-walk step
TURN_STD = 0.35  # rad, heading jitter per step
CRACK_LUMINANCE = 0.35  # crack pixels keep this share of the background brightness
GRAIN_STD = 0.03
SPLIT_OFFSETS = {"train": 0, "val": 1, "test": 2}


class SyntheticCrackGenerator(CrackSAMBase):
    """Textured surfaces with dark random-walk cracks and exact masks."""

    def __init__(self, log_level: str = "WARNING", output_dir: str = "./") -> None:
        super().__init__(log_level, output_dir)

    def _background(self, size: int, rng: np.random.Generator) -> np.ndarray:
        coarse = max(2, size // 8)
        low = rng.uniform(0.45, 0.75, (coarse, coarse)).astype(np.float32)
        low = np.asarray(Image.fromarray(low).resize((size, size), Image.BICUBIC))
        grain = rng.normal(0.0, GRAIN_STD, (size, size)).astype(np.float32)
        tint = rng.uniform(0.95, 1.05, 3).astype(np.float32)
        return np.clip((low + grain)[None, :, :] * tint[:, None, None], 0.0, 1.0)

    def _crack(self, size: int, rng: np.random.Generator) -> tuple[list[tuple[float, float]], int]:
        x, y = rng.uniform(0, size, 2)
        heading = rng.uniform(0, 2 * np.pi)
        points = [(float(x), float(y))]
        for _ in range(int(rng.integers(size // 4 + 1, size // 2 + 2))):
            heading += rng.normal(0.0, TURN_STD)
            step = rng.uniform(*STEP_RANGE)
            x, y = x + step * np.cos(heading), y + step * np.sin(heading)
            points.append((float(x), float(y)))
        return points, int(rng.integers(WIDTH_RANGE[0], WIDTH_RANGE[1] + 1))

    def _mask(self, size: int, rng: np.random.Generator) -> np.ndarray:
        canvas = Image.new("L", (size, size), 0)
        limit = MAX_POSITIVE_FRACTION * size * size
        for _ in range(int(rng.integers(1, MAX_CRACKS + 1))):
            points, width = self._crack(size, rng)
            trial = canvas.copy()
            ImageDraw.Draw(trial).line(points, fill=255, width=width, joint="curve")
            if np.count_nonzero(np.asarray(trial)) < limit:
                canvas = trial
        if not np.any(np.asarray(canvas)):
            # every crack was too wide for this size; fall back to a short hairline
            points, _ = self._crack(size, rng)
            keep = max(2, int(limit) // 8)
            ImageDraw.Draw(canvas).line(points[:keep], fill=255, width=1)
        return (np.asarray(canvas) > 0).astype(np.uint8)

    def sample(self, index: int, size: int, seed: int) -> SampleRecord:
        """Deterministic sample ``index`` of the stream seeded by ``seed``."""
        rng = np.random.default_rng([seed, index])
        image = self._background(size, rng)
        if rng.random() < CRACK_FREE_RATE:
            mask = np.zeros((size, size), dtype=np.uint8)
        else:
            mask = self._mask(size, rng)
            image = np.where(mask[None].astype(bool), image * CRACK_LUMINANCE, image)
        return SampleRecord(f"synth_{index:05d}", image.astype(np.float32), mask)

    def samples(self, n: int, size: int, seed: int) -> list[SampleRecord]:
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        return [self.sample(i, size, seed) for i in range(n)]

    def generate(self, n: int, size: int, seed: int, split: str = "train") -> DatasetManifest:
        """
        Write ``n`` image/mask PNG pairs under ``<output_dir>/<split>/``.

        Args:
            n (int): Number of samples.
            size (int): Square image size in pixels.
            seed (int): Base seed; each split draws from its own stream.
            split (str): train, val or test.

        Returns:
            DatasetManifest: Manifest describing what was written.
        """
        if not is_valid_split(split):
            raise ValueError(f"split must be one of train/val/test, got {split!r}")
        records = self.samples(n, size, seed * len(SPLIT_OFFSETS) + SPLIT_OFFSETS[split])
        image_dir = self._ensure_output_dir(os.path.join(split, IMAGE_DIR))
        mask_dir = self._ensure_output_dir(os.path.join(split, MASK_DIR))
        ids = []
        for record in records:
            write_image(os.path.join(image_dir, f"{record.id}.png"), record.image)
            write_mask(os.path.join(mask_dir, f"{record.id}.png"), record.mask)
            ids.append(record.id)
        self.logger.info(f"Wrote {n} synthetic {split} samples to {self.output_dir}")
        return DatasetManifest(self.output_dir, split, size, tuple(ids))
