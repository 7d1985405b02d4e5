"""Frozen generative prior: a small time-conditional noise predictor over latents."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule, make_schedule, q_sample_batch
from .training import OptimConfig, TrainLog, fit, trainable_parameters


def time_embed(t: int | torch.Tensor, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]`` with f_k geometric in [1e-4, 1].

    Scalar ``t`` gives a ``(dim,)`` vector, a ``(B,)`` tensor gives ``(B, dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    scalar = not torch.is_tensor(t) or t.dim() == 0
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    args = tt * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)
    return emb[0] if scalar else emb


def conv3x3(c_in: int, c_out: int, stride: int = 1, padding_mode: str = "circular") -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, padding_mode=padding_mode)


def he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def sft_modulate(feat: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Spatial feature transform ``(1 + alpha) * feat + beta``."""
    if not feat.shape == alpha.shape == beta.shape:
        raise ValueError(
            f"sft shape mismatch: {tuple(feat.shape)}, {tuple(alpha.shape)}, {tuple(beta.shape)}"
        )
    return (1.0 + alpha) * feat + beta


class ResBlock(nn.Module):
    """Pre-norm residual block; the time embedding enters as a learned scale/shift."""

    def __init__(
        self,
        channels: int,
        temb_dim: int | None,
        groups: int = 8,
        padding_mode: str = "circular",
        norm: bool = True,
    ):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, channels), channels) if norm else nn.Identity()
        self.conv1 = conv3x3(channels, channels, padding_mode=padding_mode)
        self.temb = nn.Linear(temb_dim, 2 * channels) if temb_dim else None
        self.norm2 = nn.GroupNorm(min(groups, channels), channels) if norm else nn.Identity()
        self.conv2 = conv3x3(channels, channels, padding_mode=padding_mode)

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            scale, shift = self.temb(F.silu(temb)).chunk(2, dim=1)
            h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


@dataclass(frozen=True)
class PriorArch:
    latent_channels: int = 4
    widths: tuple[int, int] = (32, 64)
    blocks: int = 2
    temb_dim: int = 128
    # (T, beta_start, beta_end) for the output skip; None leaves a bare eps head
    skip_schedule: tuple[int, float, float] | None = (1000, 1e-4, 2e-2)


# residual block order and the scale index each block lives on
def block_scales(arch: PriorArch) -> list[int]:
    return [0] * arch.blocks + [1] * arch.blocks + [0] * arch.blocks


class PriorUNet(nn.Module):
    """Two-scale U-Net noise predictor with circular padding.

    ``sft`` is an optional per-scale list of ``(alpha, beta)`` applied after
    every residual block on that scale, on both the contracting and the
    expanding path.

    With ``arch.skip_schedule`` set, the returned eps is
    ``sqrt(1 - abar_t) * z_t + sqrt(abar_t) * net(z_t, t)``. Near t = T the
    implied x0 estimate divides by ``sqrt(abar_t)`` (about 1/156 for the
    default schedule), so a bare eps head turns tiny biases into large latent
    offsets; the skip keeps that estimate bounded by the network output.
    """

    def __init__(self, arch: PriorArch = PriorArch()):
        super().__init__()
        self.arch = arch
        c0, c1 = arch.widths
        self.temb_in = c0
        self.temb_mlp = nn.Sequential(nn.Linear(c0, arch.temb_dim), nn.SiLU(), nn.Linear(arch.temb_dim, arch.temb_dim))
        self.conv_in = conv3x3(arch.latent_channels, c0)
        self.down = nn.ModuleList(ResBlock(c0, arch.temb_dim) for _ in range(arch.blocks))
        self.downsample = conv3x3(c0, c1, stride=2)
        self.mid = nn.ModuleList(ResBlock(c1, arch.temb_dim) for _ in range(arch.blocks))
        self.upsample = conv3x3(c1, c0)
        self.up = nn.ModuleList(ResBlock(c0, arch.temb_dim) for _ in range(arch.blocks))
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = conv3x3(c0, arch.latent_channels)
        he_init(self)
        zero_module(self.conv_out)
        self.skip_alpha_bar = None
        if arch.skip_schedule is not None:
            self.skip_alpha_bar = make_schedule(*arch.skip_schedule).alpha_bar

    def output_skip(self, out: torch.Tensor, z: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
        if self.skip_alpha_bar is None:
            return out
        idx = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t, dtype=np.int64) - 1
        if np.any(idx < 0) or np.any(idx >= len(self.skip_alpha_bar)):
            raise ValueError(f"timestep out of range 1..{len(self.skip_alpha_bar)}")
        ab = torch.as_tensor(self.skip_alpha_bar[idx], dtype=z.dtype)
        if ab.dim():
            ab = ab.view(-1, 1, 1, 1)
        return (1.0 - ab).sqrt() * z + ab.sqrt() * out

    def embed_t(self, t: int | torch.Tensor, batch: int, dtype: torch.dtype) -> torch.Tensor:
        emb = time_embed(t, self.temb_in, dtype)
        if emb.dim() == 1:
            emb = emb.expand(batch, -1)
        return self.temb_mlp(emb)

    def forward(
        self,
        z: torch.Tensor,
        t: int | torch.Tensor,
        sft: Sequence[tuple[torch.Tensor, torch.Tensor]] | None = None,
        probe: list | None = None,
    ) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.arch.latent_channels:
            raise ValueError(f"expected (B, {self.arch.latent_channels}, H, W) latent, got {tuple(z.shape)}")
        if z.shape[2] % 2 or z.shape[3] % 2:
            raise ValueError(f"latent spatial dims must be even, got {tuple(z.shape[2:])}")
        temb = self.embed_t(t, z.shape[0], z.dtype)

        def run(block: ResBlock, h: torch.Tensor, scale: int) -> torch.Tensor:
            h = block(h, temb)
            if sft is not None:
                alpha, beta = sft[scale]
                out = sft_modulate(h, alpha, beta)
                if probe is not None:
                    probe.append((h, out))
                h = out
            return h

        h = self.conv_in(z)
        for blk in self.down:
            h = run(blk, h, 0)
        skip = h
        h = self.downsample(h)
        for blk in self.mid:
            h = run(blk, h, 1)
        h = self.upsample(F.interpolate(h, scale_factor=2, mode="nearest")) + skip
        for blk in self.up:
            h = run(blk, h, 0)
        return self.output_skip(self.conv_out(F.silu(self.norm_out(h))), z, t)


def prior_forward(params: PriorUNet, z_t: torch.Tensor, t: int | torch.Tensor) -> torch.Tensor:
    return params(z_t, t)


def diffusion_loss(
    model_eps,
    x0: torch.Tensor,
    schedule: NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    """eps-MSE at uniformly drawn timesteps; ``model_eps(z_t, t_batch)``."""
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    z_t = q_sample_batch(x0, t, eps, schedule)
    return F.mse_loss(model_eps(z_t, t), eps)


def draw_batch(data: torch.Tensor, batch_size: int, gen: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, data.shape[0], (batch_size,), generator=gen)
    return data[idx]


def train_prior(
    params: PriorUNet,
    latents: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: OptimConfig,
    steps: int,
    frozen: Sequence[str] = (),
    log_every: int = 0,
) -> TrainLog:
    """Unconditional eps-prediction training on HR latents, in place."""
    if latents.shape[0] == 0:
        raise ValueError("empty latent dataset")
    trainable = [p for _, p in trainable_parameters(params, frozen)]

    def loss_fn(step: int, gen: torch.Generator) -> torch.Tensor:
        x0 = draw_batch(latents, cfg.batch_size, gen)
        return diffusion_loss(params, x0, schedule, gen)

    params.train()
    return fit(trainable, loss_fn, steps, cfg, log_every=log_every, name="prior")
