"""Time-aware conditioning encoder, SFT heads and the fine-tuning stage."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule, q_sample, q_sample_batch, snr
from .prior import PriorUNet, ResBlock, conv3x3, he_init, time_embed, zero_module
from .training import DivergenceError, OptimConfig, TrainLog, fit, params_digest, trainable_parameters

NULL_PROMPT = 0
NEGATIVE_PROMPT = 1


@dataclass(frozen=True)
class EncoderArch:
    latent_channels: int = 4
    widths: tuple[int, int] = (16, 32)
    prior_widths: tuple[int, int] = (32, 64)
    temb_dim: int = 64
    n_prompts: int = 2
    time_aware: bool = True


class SFTHead(nn.Module):
    """Small conv net mapping one feature scale to ``(alpha, beta)``."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = conv3x3(c_in, c_out)
        self.conv2 = zero_module(conv3x3(c_out, 2 * c_out))

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        alpha, beta = self.conv2(F.silu(self.conv1(feat))).chunk(2, dim=1)
        return alpha, beta


class TimeAwareEncoder(nn.Module):
    """Contracting-path encoder over the LR latent, one feature map per prior scale.

    With ``time_aware=False`` the timestep input is pinned to 0, giving the
    time-blind ablation with an identical parameter layout.
    """

    def __init__(self, arch: EncoderArch = EncoderArch()):
        super().__init__()
        self.arch = arch
        c0, c1 = arch.widths
        self.temb_in = c0
        self.temb_mlp = nn.Sequential(nn.Linear(c0, arch.temb_dim), nn.SiLU(), nn.Linear(arch.temb_dim, arch.temb_dim))
        self.prompt = nn.Embedding(arch.n_prompts, arch.temb_dim)
        self.conv_in = conv3x3(arch.latent_channels, c0)
        self.block0 = ResBlock(c0, arch.temb_dim)
        self.downsample = conv3x3(c0, c1, stride=2)
        self.block1 = ResBlock(c1, arch.temb_dim)
        he_init(self)
        nn.init.normal_(self.prompt.weight, std=1.0)
        self.heads = nn.ModuleList([SFTHead(c0, arch.prior_widths[0]), SFTHead(c1, arch.prior_widths[1])])

    def forward(
        self,
        lr_latent: torch.Tensor,
        t: int | torch.Tensor,
        prompt: int = NULL_PROMPT,
    ) -> tuple[list[torch.Tensor], list[tuple[torch.Tensor, torch.Tensor]]]:
        if lr_latent.dim() != 4 or lr_latent.shape[1] != self.arch.latent_channels:
            raise ValueError(f"expected (B, {self.arch.latent_channels}, H, W) latent, got {tuple(lr_latent.shape)}")
        batch = lr_latent.shape[0]
        if not self.arch.time_aware:
            t = 0
        emb = time_embed(t, self.temb_in, lr_latent.dtype)
        if emb.dim() == 1:
            emb = emb.expand(batch, -1)
        temb = self.temb_mlp(emb) + self.prompt.weight[prompt]
        f0 = self.block0(self.conv_in(lr_latent), temb)
        f1 = self.block1(self.downsample(f0), temb)
        feats = [f0, f1]
        return feats, [head(f) for head, f in zip(self.heads, feats)]


def encoder_forward(enc_params: TimeAwareEncoder, lr_latent: torch.Tensor, t, prompt: int = NULL_PROMPT):
    return enc_params(lr_latent, t, prompt)


def conditioned_forward(
    prior_params: PriorUNet,
    enc_params: TimeAwareEncoder,
    z_t: torch.Tensor,
    lr_latent: torch.Tensor,
    t: int | torch.Tensor,
    prompt: int = NULL_PROMPT,
    probe: list | None = None,
) -> torch.Tensor:
    if z_t.shape != lr_latent.shape:
        raise ValueError(f"z_t {tuple(z_t.shape)} and lr_latent {tuple(lr_latent.shape)} differ")
    _, sft = enc_params(lr_latent, t, prompt)
    return prior_params(z_t, t, sft=sft, probe=probe)


@dataclass
class Condition:
    """Conditioning handle passed through the samplers."""

    lr_latent: torch.Tensor
    prompt: int = NULL_PROMPT

    def crop(self, r: int, c: int, p: int) -> "Condition":
        return Condition(self.lr_latent[:, :, r:r + p, c:c + p], self.prompt)

    def with_prompt(self, prompt: int) -> "Condition":
        return Condition(self.lr_latent, prompt)

    def stack(self, conds: list["Condition"]) -> "Condition":
        return Condition(torch.cat([c.lr_latent for c in conds]), self.prompt)


class ConditionedPredictor:
    """Predictor callback ``(z, t, Condition) -> eps`` over frozen networks."""

    def __init__(self, prior: PriorUNet, encoder: TimeAwareEncoder):
        self.prior = prior.eval()
        self.encoder = encoder.eval()

    @torch.no_grad()
    def __call__(self, z: torch.Tensor, t: int, cond: Condition) -> torch.Tensor:
        return conditioned_forward(self.prior, self.encoder, z, cond.lr_latent, t, cond.prompt)


def finetune_encoder(
    prior_params: PriorUNet,
    enc_params: TimeAwareEncoder,
    lr_latents: torch.Tensor,
    hr_latents: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: OptimConfig,
    steps: int,
    log_every: int = 0,
) -> TrainLog:
    """Train encoder + SFT heads on eps-MSE with the prior frozen, in place."""
    if lr_latents.shape != hr_latents.shape:
        raise ValueError("lr/hr latent sets differ in shape")
    before = params_digest(prior_params)
    trainable_parameters(prior_params, frozen=[n for n, _ in prior_params.named_parameters()])
    trainable = [p for _, p in trainable_parameters(enc_params)]

    def loss_fn(step: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, hr_latents.shape[0], (cfg.batch_size,), generator=gen)
        x0, lr = hr_latents[idx], lr_latents[idx]
        t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        z_t = q_sample_batch(x0, t, eps, schedule)
        return F.mse_loss(conditioned_forward(prior_params, enc_params, z_t, lr, t), eps)

    prior_params.eval()
    enc_params.train()
    history = fit(trainable, loss_fn, steps, cfg, log_every=log_every, name="encoder")
    if params_digest(prior_params) != before:
        raise DivergenceError("prior parameters changed during encoder fine-tuning")
    return history


@torch.no_grad()
def validation_eps_mse(
    prior_params: PriorUNet,
    enc_params: TimeAwareEncoder,
    lr_latents: torch.Tensor,
    hr_latents: torch.Tensor,
    schedule: NoiseSchedule,
    seed: int = 1234,
    draws: int = 4,
) -> float:
    """eps-MSE on held-out pairs with a fixed set of (t, eps) draws."""
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(draws):
        t = torch.randint(1, schedule.T + 1, (hr_latents.shape[0],), generator=gen)
        eps = torch.randn(hr_latents.shape, generator=gen, dtype=hr_latents.dtype)
        z_t = q_sample_batch(hr_latents, t, eps, schedule)
        pred = conditioned_forward(prior_params, enc_params, z_t, lr_latents, t)
        total += float(F.mse_loss(pred, eps))
    return total / draws


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of flattened tensors in float64, clipped to [-1, 1].

    ``dot / sqrt(|a|^2 |b|^2)`` returns exactly 1.0 for ``a is b``.
    """
    a = a.detach().double().flatten()
    b = b.detach().double().flatten()
    denom = (torch.dot(a, a) * torch.dot(b, b)).sqrt()
    if denom == 0:
        return 1.0 if torch.equal(a, b) else 0.0
    return float(torch.clamp(torch.dot(a, b) / denom, -1.0, 1.0))


@torch.no_grad()
def cosine_probe(
    prior_params: PriorUNet,
    enc_params: TimeAwareEncoder,
    lr_latent: torch.Tensor,
    hr_latent: torch.Tensor,
    schedule: NoiseSchedule,
    t_list: Sequence[int],
    seed: int = 0,
) -> list[tuple[int, float, float]]:
    """Per-timestep mean cosine between prior features before and after SFT."""
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(hr_latent.shape, generator=gen, dtype=hr_latent.dtype)
    rows = []
    for t in t_list:
        probe: list = []
        z_t = q_sample(hr_latent, t, eps, schedule)
        conditioned_forward(prior_params, enc_params, z_t, lr_latent, t, probe=probe)
        cos = sum(cosine(before, after) for before, after in probe) / len(probe)
        rows.append((int(t), snr(schedule, t), cos))
    return rows


def probe_minimum(rows: Sequence[tuple[int, float, float]]) -> tuple[int, float, float]:
    return min(rows, key=lambda r: r[2])


def write_probe_csv(rows: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "snr", "cosine"])
        for t, s, c in rows:
            w.writerow([t, repr(s), repr(c)])
