from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .base import CrackSAMBase
from .errors import DimensionError, IngestionError
from .utils import is_valid_split

IMAGE_DIR = "images"
MASK_DIR = "masks"
MASK_LEVEL = 127


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    image_path: str | None = None
    mask_path: str | None = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(f"sample {self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DimensionError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str = "train"
    target_size: int = 448
    ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not is_valid_split(self.split):
            raise ValueError(f"split must be one of train/val/test, got {self.split!r}")

    @property
    def image_dir(self) -> str:
        return os.path.join(self.root, self.split, IMAGE_DIR)

    @property
    def mask_dir(self) -> str:
        return os.path.join(self.root, self.split, MASK_DIR)


def _stems(directory: str) -> dict[str, str]:
    return {
        os.path.splitext(name)[0]: os.path.join(directory, name)
        for name in os.listdir(directory)
        if name.lower().endswith(".png")
    }


def read_image(path: str, size: int | None = None) -> np.ndarray:
    """PNG -> (3, H, W) float32 in [0, 1], bilinear-resized to size x size when given."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def read_mask(path: str, size: int | None = None) -> np.ndarray:
    """Grayscale PNG -> (H, W) uint8 mask, 1 where the level exceeds 127."""
    with Image.open(path) as img:
        img = img.convert("L")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.NEAREST)
        return (np.asarray(img) > MASK_LEVEL).astype(np.uint8)


def write_image(path: str, image: np.ndarray) -> None:
    """(3, H, W) float image in [0, 1] or (H, W, 3) uint8 levels -> RGB PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask(path: str, mask: np.ndarray) -> None:
    """Binary mask -> {0, 255} grayscale PNG."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


class DatasetLoader(CrackSAMBase):
    def __init__(self, log_level: str = "WARNING", output_dir: str = "./", num_workers: int = 0) -> None:
        super().__init__(log_level, output_dir)
        self.num_workers = num_workers

    def manifest(self, root: str, split: str = "train", target_size: int = 448) -> DatasetManifest:
        """
        Pair every image with its mask by stem.

        Args:
            root (str): Dataset root holding <split>/images and <split>/masks.
            split (str): One of train, val, test.
            target_size (int): Square size samples are resized to.

        Returns:
            DatasetManifest: Sample ids in lexicographic order.
        """
        manifest = DatasetManifest(root, split, target_size)
        for directory in (manifest.image_dir, manifest.mask_dir):
            if not os.path.isdir(directory):
                self.logger.error(f"Missing dataset directory: {directory}")
                raise IngestionError(f"dataset directory not found: {directory}")
        images = _stems(manifest.image_dir)
        masks = _stems(manifest.mask_dir)
        missing = sorted(set(images) - set(masks))
        if missing:
            raise IngestionError(f"no mask for image stem(s): {', '.join(missing)}")
        return DatasetManifest(root, split, target_size, tuple(sorted(images)))

    def _load_one(self, manifest: DatasetManifest, stem: str) -> SampleRecord:
        image_path = os.path.join(manifest.image_dir, f"{stem}.png")
        mask_path = os.path.join(manifest.mask_dir, f"{stem}.png")
        return SampleRecord(
            stem,
            read_image(image_path, manifest.target_size),
            read_mask(mask_path, manifest.target_size),
            image_path,
            mask_path,
        )

    def load(self, manifest: DatasetManifest) -> list[SampleRecord]:
        if not manifest.ids:
            manifest = self.manifest(manifest.root, manifest.split, manifest.target_size)
        if self.num_workers > 0:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                samples = list(pool.map(lambda s: self._load_one(manifest, s), manifest.ids))
        else:
            samples = [self._load_one(manifest, s) for s in manifest.ids]
        self.logger.info(f"Loaded {len(samples)} samples from {manifest.root}/{manifest.split}")
        return samples


def load_dataset(manifest: DatasetManifest, num_workers: int = 0) -> list[SampleRecord]:
    return DatasetLoader(num_workers=num_workers).load(manifest)
