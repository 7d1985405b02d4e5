"""Simplified blind degradation for LR/HR pair synthesis, and the pre-cleaning pass."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class DegradationParams:
    # first-order Real-ESRGAN ranges: blur sigma in HR pixels, noise sigma 1/255 to 30/255
    blur_sigma: tuple[float, float] = (0.2, 3.0)
    factor: int = 4
    noise_sigma: tuple[float, float] = (1 / 255, 30 / 255)
    levels: int = 256

    def __post_init__(self):
        for name in ("blur_sigma", "noise_sigma"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative range, got {(lo, hi)}")
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")


def resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
    out = cv2.resize(np.ascontiguousarray(img, dtype=np.float32), (width, height), interpolation=cv2.INTER_CUBIC)
    return out.reshape(height, width, -1) if img.ndim == 3 else out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.astype(np.float32)
    return ndimage.gaussian_filter(img.astype(np.float32), sigma=(sigma, sigma, 0), mode="reflect")


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return img + (sigma * rng.standard_normal(img.shape)).astype(np.float32)


def quantize(img: np.ndarray, levels: int = 256) -> np.ndarray:
    q = levels - 1
    return (np.round(np.clip(img, 0.0, 1.0) * q) / q).astype(np.float32)


def degrade_stages(hr: np.ndarray, params: DegradationParams, seed: int) -> dict[str, np.ndarray]:
    """All intermediate images of the pipeline blur -> down -> noise -> quantize -> up."""
    h, w = hr.shape[:2]
    if h % params.factor or w % params.factor:
        raise ValueError(f"HR dims {hr.shape[:2]} not divisible by {params.factor}")
    rng = np.random.default_rng(int(seed))
    blur = rng.uniform(*params.blur_sigma)
    noise = rng.uniform(*params.noise_sigma)
    stages = {"blurred": gaussian_blur(hr, blur)}
    stages["down"] = resize_bicubic(stages["blurred"], h // params.factor, w // params.factor)
    stages["noisy"] = add_gaussian_noise(stages["down"], noise, rng)
    stages["lr"] = quantize(stages["noisy"], params.levels)
    stages["up"] = np.clip(resize_bicubic(stages["lr"], h, w), 0.0, 1.0)
    return stages


def degrade(hr: np.ndarray, params: DegradationParams = DegradationParams(), seed: int = 0) -> np.ndarray:
    """LR version of ``hr``, bicubically re-upsampled to HR size, in [0, 1]."""
    return degrade_stages(hr, params, seed)["up"]


def degrade_lr(hr: np.ndarray, params: DegradationParams = DegradationParams(), seed: int = 0) -> np.ndarray:
    """LR image at 1/factor resolution."""
    return degrade_stages(hr, params, seed)["lr"]


def upsample(lr: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w = lr.shape[:2]
    return np.clip(resize_bicubic(lr, h * factor, w * factor), 0.0, 1.0)


def preclean(lr: np.ndarray) -> np.ndarray:
    """3x3 median restoration, 2x bicubic downsample, bicubic back to input size."""
    h, w = lr.shape[:2]
    cleaned = ndimage.median_filter(lr.astype(np.float32), size=(3, 3, 1), mode="reflect")
    small = resize_bicubic(cleaned, max(1, h // 2), max(1, w // 2))
    return np.clip(resize_bicubic(small, h, w), 0.0, 1.0)
