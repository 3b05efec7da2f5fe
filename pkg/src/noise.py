"""
Artificial corruption pipelines on (H, W, 3) uint8 RGB images.

case 1: darken (V channel minus ``bri``) then Gaussian blur.
case 2: strong Gaussian blur, bicubic downsample by ``scale``, bicubic upsample back.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError, DimensionError
from .utils import is_odd_kernel, is_valid_noise_case

DEFAULT_KERNEL = {1: 9, 2: 21}


@dataclass(frozen=True)
class NoiseSpec:
    case: int
    bri: int = 50
    kernel_size: int | None = None
    scale: int = 2

    def __post_init__(self) -> None:
        if self.case not in DEFAULT_KERNEL:
            raise ConfigError(f"noise case must be 1 or 2, got {self.case}")
        if self.kernel_size is None:
            object.__setattr__(self, "kernel_size", DEFAULT_KERNEL[self.case])
        if not is_odd_kernel(self.kernel_size):
            raise ConfigError(f"Gaussian kernel size must be an odd positive integer, got {self.kernel_size}")
        if self.bri < 0:
            raise ConfigError(f"brightness delta must be >= 0, got {self.bri}")
        if self.scale < 1:
            raise ConfigError(f"downsampling scale must be >= 1, got {self.scale}")

    @property
    def name(self) -> str:
        return f"case{self.case}"

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "NoiseSpec":
        if not is_valid_noise_case(name):
            raise ConfigError(f"noise must be 'case1' or 'case2', got {name!r}")
        return cls(case=int(name[-1]), **kwargs)


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    return image


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float32 HSV with H in degrees [0, 360) and S, V in [0, 255]."""
    hsv = cv2.cvtColor(_check_rgb(image).astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 1] *= 255.0
    return hsv


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = _check_rgb(hsv).astype(np.float32, copy=True)
    hsv[..., 1] /= 255.0
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def gaussian_sigma(k: int) -> float:
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def _kernel_1d(k: int) -> np.ndarray:
    if not is_odd_kernel(k):
        raise ConfigError(f"Gaussian kernel size must be an odd positive integer, got {k}")
    # explicit sigma: OpenCV swaps in fixed tables for small k when sigma <= 0
    return cv2.getGaussianKernel(k, gaussian_sigma(k), cv2.CV_64F).ravel()


def gaussian_kernel(k: int) -> np.ndarray:
    g = _kernel_1d(k)
    return np.outer(g, g)


def gaussian_blur(image: np.ndarray, k: int) -> np.ndarray:
    """Separable k x k Gaussian blur with edge-replicate borders, float32 out."""
    g = _kernel_1d(k)
    src = np.asarray(image, dtype=np.float32)
    return cv2.sepFilter2D(src, cv2.CV_32F, g, g, borderType=cv2.BORDER_REPLICATE)


def _to_levels(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def noise_case1(image: np.ndarray, bri: int = 50, k: int = 9) -> np.ndarray:
    hsv = rgb_to_hsv(image)
    hsv[..., 2] = np.clip(hsv[..., 2] - bri, 0.0, 255.0)
    return _to_levels(gaussian_blur(hsv_to_rgb(hsv), k))


def noise_case2(image: np.ndarray, k: int = 21, s: int = 2) -> np.ndarray:
    height, width = _check_rgb(image).shape[:2]
    blurred = gaussian_blur(image, k)
    small = cv2.resize(blurred, (max(1, width // s), max(1, height // s)), interpolation=cv2.INTER_CUBIC)
    restored = cv2.resize(small, (width, height), interpolation=cv2.INTER_CUBIC)
    return _to_levels(restored)


def apply_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.case == 1:
        return noise_case1(image, spec.bri, spec.kernel_size)
    return noise_case2(image, spec.kernel_size, spec.scale)
