"""Color correction of generated images against the LR input.

Images are ``(H, W, 3)`` arrays in [0, 1]. Clamping is applied last.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# a-trous lowpass kernel
KERNEL = np.array(
    [
        [1 / 16, 1 / 8, 1 / 16],
        [1 / 8, 1 / 4, 1 / 8],
        [1 / 16, 1 / 8, 1 / 16],
    ]
)
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def of(cls, img: np.ndarray) -> "ChannelStats":
        flat = np.asarray(img, dtype=np.float64).reshape(-1, img.shape[-1])
        return cls(mean=flat.mean(axis=0), std=flat.std(axis=0))


def pixel_color_correct(y_hat: np.ndarray, x: np.ndarray, clamp: bool = True, return_info: bool = False):
    """Match per-channel mean/std of ``y_hat`` to those of ``x``.

    Channels of ``y_hat`` with std below ``STD_FLOOR`` use the floor instead;
    their indices are reported when ``return_info`` is set.
    """
    src, ref = ChannelStats.of(y_hat), ChannelStats.of(x)
    degenerate = [int(c) for c in np.flatnonzero(src.std < STD_FLOOR)]
    std = np.maximum(src.std, STD_FLOOR)
    out = (np.asarray(y_hat, dtype=np.float64) - src.mean) / std * ref.std + ref.mean
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return (out, {"degenerate_channels": degenerate}) if return_info else out


def dilated_lowpass(img: np.ndarray, dilation: int) -> np.ndarray:
    """3x3 kernel convolution with the given dilation and reflect padding."""
    d = dilation
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    pad = [(d, d), (d, d)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            out += KERNEL[i, j] * padded[i * d:i * d + h, j * d:j * d + w]
    return out


@dataclass
class WaveletPyramid:
    high: list[np.ndarray]
    low: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.low + sum(self.high)


def wavelet_decompose(img: np.ndarray, levels: int) -> WaveletPyramid:
    """Level i uses dilation 2**i; ``high[i-1] = L^{i-1} - L^i``."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if 2 ** levels >= min(img.shape[:2]):
        raise ValueError(f"image {img.shape[:2]} too small for {levels} levels (dilation {2 ** levels})")
    low = np.asarray(img, dtype=np.float64)
    high = []
    for i in range(1, levels + 1):
        nxt = dilated_lowpass(low, 2 ** i)
        high.append(low - nxt)
        low = nxt
    return WaveletPyramid(high=high, low=low)


def wavelet_color_correct(y_hat: np.ndarray, x: np.ndarray, levels: int = 3, clamp: bool = True) -> np.ndarray:
    """High-frequency bands of ``y_hat`` over the low-frequency residual of ``x``."""
    if y_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {x.shape}")
    y_pyr = wavelet_decompose(y_hat, levels)
    x_pyr = wavelet_decompose(x, levels)
    out = sum(y_pyr.high) + x_pyr.low
    return np.clip(out, 0.0, 1.0) if clamp else out


def color_correct(y_hat: np.ndarray, x: np.ndarray, mode: str = "pixel", levels: int = 3) -> np.ndarray:
    if mode == "pixel":
        return pixel_color_correct(y_hat, x)
    if mode == "wavelet":
        return wavelet_color_correct(y_hat, x, levels)
    if mode == "none":
        return np.clip(np.asarray(y_hat, dtype=np.float64), 0.0, 1.0)
    raise ValueError(f"unknown color mode {mode!r}")
