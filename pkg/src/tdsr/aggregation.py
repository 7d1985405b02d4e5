"""Progressive patch aggregation: tiled sampling with Gaussian-weighted eps fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, Predictor, run_reverse


def _starts(dim: int, p: int, stride: int) -> list[int]:
    starts = list(range(0, dim - p, stride))
    if not starts or starts[-1] != dim - p:
        starts.append(dim - p)
    return starts


def gaussian_weight(p: int, sigma: float) -> np.ndarray:
    """Separable Gaussian ``exp(-d^2 / (2 sigma^2))`` about the patch centre, in float64."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.arange(p) - (p - 1) / 2
    g = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    return np.outer(g, g)


@dataclass
class PatchLayout:
    height: int
    width: int
    patch: int
    origins: list[tuple[int, int]]
    kernel: np.ndarray
    # per-patch w_n / w_hat restricted to the patch window
    normalized: list[np.ndarray] = field(default_factory=list)
    w_hat: np.ndarray | None = None

    @property
    def M(self) -> int:
        return len(self.origins)

    def __post_init__(self):
        if not self.normalized:
            self._normalize()

    def _normalize(self) -> None:
        p = self.patch
        w_hat = np.zeros((self.height, self.width))
        for r, c in self.origins:
            w_hat[r:r + p, c:c + p] += self.kernel
        self.w_hat = w_hat
        self.normalized = [self.kernel / w_hat[r:r + p, c:c + p] for r, c in self.origins]

    def weight_sum(self) -> np.ndarray:
        """Sum of the normalised weight maps over the full grid (should be 1)."""
        p = self.patch
        total = np.zeros((self.height, self.width))
        for (r, c), w in zip(self.origins, self.normalized):
            total[r:r + p, c:c + p] += w
        return total

    def coverage(self) -> np.ndarray:
        p = self.patch
        count = np.zeros((self.height, self.width), dtype=int)
        for r, c in self.origins:
            count[r:r + p, c:c + p] += 1
        return count


def plan_patches(h: int, w: int, p: int, overlap: int, sigma: float | None = None) -> PatchLayout:
    """Regular grid of p x p windows with stride ``p - overlap``.

    The last row/column is shifted inward to end exactly at the boundary.
    """
    if p > min(h, w):
        raise ValueError(f"patch {p} larger than grid {h}x{w}")
    if not 0 < overlap < p:
        raise ValueError(f"overlap must lie in (0, {p}), got {overlap}")
    stride = p - overlap
    origins = [(r, c) for r in _starts(h, p, stride) for c in _starts(w, p, stride)]
    return PatchLayout(h, w, p, origins, gaussian_weight(p, sigma if sigma is not None else p / 4))


def grid_tiles(h: int, w: int, p: int) -> PatchLayout:
    """Non-overlapping tiles with box weights: naive stitching."""
    if h % p or w % p:
        raise ValueError(f"grid {h}x{w} not divisible by tile {p}")
    origins = [(r, c) for r in range(0, h, p) for c in range(0, w, p)]
    return PatchLayout(h, w, p, origins, np.ones((p, p)))


def aggregate_eps(patch_preds: list[torch.Tensor], layout: PatchLayout) -> torch.Tensor:
    """Fuse per-patch predictions with their normalised weights, row-major over patches."""
    if len(patch_preds) != layout.M:
        raise ValueError(f"expected {layout.M} patch predictions, got {len(patch_preds)}")
    p = layout.patch
    first = patch_preds[0]
    for pred in patch_preds:
        if pred.shape[-2:] != (p, p) or pred.shape[:-2] != first.shape[:-2]:
            raise ValueError(f"patch prediction of shape {tuple(pred.shape)} does not match {p}x{p}")
    out = torch.zeros(*first.shape[:-2], layout.height, layout.width, dtype=first.dtype)
    for (r, c), weight, pred in zip(layout.origins, layout.normalized, patch_preds):
        out[..., r:r + p, c:c + p] += torch.as_tensor(weight, dtype=first.dtype) * pred
    return out


def patch_eps_fn(predictor: Predictor, cond, layout: PatchLayout, batch_patches: bool = False):
    """eps function over the full grid: predict per patch, then aggregate.

    ``cond`` must provide ``crop(row, col, p)`` returning the matching
    conditioning window.
    """
    p = layout.patch

    def eps_fn(z: torch.Tensor, t: int) -> torch.Tensor:
        if z.shape[-2:] != (layout.height, layout.width):
            raise ValueError(f"state {tuple(z.shape)} does not match layout {layout.height}x{layout.width}")
        if batch_patches and layout.M > 1:
            zs = torch.cat([z[..., r:r + p, c:c + p] for r, c in layout.origins])
            cs = cond.stack([cond.crop(r, c, p) for r, c in layout.origins])
            preds = list(predictor(zs, t, cs).split(z.shape[0]))
        else:
            preds = [predictor(z[..., r:r + p, c:c + p], t, cond.crop(r, c, p)) for r, c in layout.origins]
        return aggregate_eps(preds, layout)

    return eps_fn


@torch.no_grad()
def progressive_sample(
    predictor: Predictor,
    cond,
    layout: PatchLayout,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    shape: tuple[int, ...] | None = None,
    batch_patches: bool = False,
    on_step=None,
) -> torch.Tensor:
    """Sample the full grid, fusing patch predictions at every timestep.

    Noise is drawn on the full grid before splitting, so overlapping patches
    always see the same state.
    """
    if shape is None:
        shape = tuple(cond.lr_latent.shape)
    if tuple(shape[-2:]) != (layout.height, layout.width):
        raise ValueError(f"shape {shape} inconsistent with layout {layout.height}x{layout.width}")
    eps_fn = patch_eps_fn(predictor, cond, layout, batch_patches)
    return run_reverse(eps_fn, shape, schedule, steps, seed, on_step=on_step)


def seam_score(z: torch.Tensor, col: int) -> float:
    """Mean absolute horizontal difference across the seam between ``col-1`` and ``col``."""
    return float((z[..., col] - z[..., col - 1]).abs().mean())
