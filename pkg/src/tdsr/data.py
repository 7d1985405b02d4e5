"""Procedural HR textures used as a self-contained training corpus."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

KINDS = ("sinusoid", "noise", "polygons")


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _random_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(n, 3))


def sinusoid_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    base = _random_colors(rng, 1)[0]
    img += base
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += 0.2 * wave[..., None] * rng.uniform(-1, 1, size=3)
    return img


def noise_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    sigma = rng.uniform(1.5, 4.0)
    field = ndimage.gaussian_filter(rng.standard_normal((size, size, 2)), sigma=(sigma, sigma, 0), mode="wrap")
    field /= field.std(axis=(0, 1), keepdims=True) + 1e-12
    mix = rng.uniform(-0.15, 0.15, size=(2, 3))
    return _random_colors(rng, 1)[0] + field @ mix


def polygon_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    scale = 4
    canvas = Image.new("RGB", (size * scale, size * scale), tuple(int(c * 255) for c in _random_colors(rng, 1)[0]))
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(2, 6)):
        cx, cy = rng.uniform(0, size * scale, 2)
        radius = rng.uniform(0.15, 0.45) * size * scale
        n = rng.integers(3, 7)
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        pts = [(cx + radius * np.cos(a), cy + radius * np.sin(a)) for a in angles]
        draw.polygon(pts, fill=tuple(int(c * 255) for c in _random_colors(rng, 1)[0]))
    # supersampled rendering, box-filtered down, gives anti-aliased edges
    canvas = canvas.resize((size, size), Image.BOX)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def make_texture(seed: int, index: int, size: int = 64, kind: str | None = None) -> np.ndarray:
    """Deterministic texture ``(size, size, 3)`` float32 in [0, 1]."""
    rng = _rng(seed, index)
    kind = kind or KINDS[index % len(KINDS)]
    if kind == "sinusoid":
        img = sinusoid_texture(rng, size)
    elif kind == "noise":
        img = noise_texture(rng, size)
    elif kind == "polygons":
        img = polygon_texture(rng, size)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset(n: int, seed: int, size: int = 64) -> np.ndarray:
    return np.stack([make_texture(seed, i, size) for i in range(n)])
