"""PSNR and SSIM on the BT.601 luminance channel of [0, 1] RGB images."""
from __future__ import annotations

import math

import numpy as np
from scipy import signal

LUMA = np.array([0.299, 0.587, 0.114])
# returned for identical inputs instead of +inf
PSNR_SENTINEL = 100.0


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ LUMA


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    _check(a, b)
    mse = float(np.mean((luminance(a) - luminance(b)) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, K1=0.01, K2=0.03, range 1."""
    _check(a, b)
    x, y = luminance(a), luminance(b)
    win = gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(img):
        return signal.correlate2d(img, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
