"""Toy convolutional autoencoder (4x spatial reduction) and controllable feature wrapping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .prior import ResBlock, conv3x3, he_init, zero_module
from .training import DivergenceError, OptimConfig, TrainLog, fit, params_digest, trainable_parameters


@dataclass(frozen=True)
class AEArch:
    latent_channels: int = 4
    # feature widths at full, 1/2 and 1/4 resolution
    widths: tuple[int, int, int] = (16, 32, 64)
    # GroupNorm discards absolute colour and makes crop-trained models
    # resolution dependent, so the default autoencoder runs without it
    norm: bool = False


def _conv(c_in: int, c_out: int, stride: int = 1) -> nn.Conv2d:
    return conv3x3(c_in, c_out, stride=stride, padding_mode="zeros")


def _block(c: int, norm: bool) -> ResBlock:
    return ResBlock(c, None, padding_mode="zeros", norm=norm)


def _norm(c: int, norm: bool) -> nn.Module:
    return nn.GroupNorm(8, c) if norm else nn.Identity()


class Autoencoder(nn.Module):
    """Encoder features are returned finest-first; the decoder visits scales coarsest-first."""

    def __init__(self, arch: AEArch = AEArch()):
        super().__init__()
        self.arch = arch
        c0, c1, c2 = arch.widths
        self.enc_in = _conv(3, c0)
        self.enc0 = _block(c0, arch.norm)
        self.enc_down0 = _conv(c0, c1, stride=2)
        self.enc1 = _block(c1, arch.norm)
        self.enc_down1 = _conv(c1, c2, stride=2)
        self.enc2 = _block(c2, arch.norm)
        self.enc_norm = _norm(c2, arch.norm)
        self.enc_out = _conv(c2, arch.latent_channels)

        self.dec_in = _conv(arch.latent_channels, c2)
        self.dec2 = _block(c2, arch.norm)
        self.dec_up1 = _conv(c2, c1)
        self.dec1 = _block(c1, arch.norm)
        self.dec_up0 = _conv(c1, c0)
        self.dec0 = _block(c0, arch.norm)
        self.dec_norm = _norm(c0, arch.norm)
        self.dec_out = _conv(c0, 3)
        he_init(self)
        # maps raw latents to roughly unit variance for the diffusion model
        self.register_buffer("latent_scale", torch.ones(()))

    def encode_raw(self, img: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image, got {tuple(img.shape)}")
        if img.shape[2] % 4 or img.shape[3] % 4:
            raise ValueError(f"image dims must be divisible by 4, got {tuple(img.shape[2:])}")
        h0 = self.enc0(self.enc_in(2.0 * img - 1.0))
        h1 = self.enc1(self.enc_down0(h0))
        h2 = self.enc2(self.enc_down1(h1))
        z = self.enc_out(F.silu(self.enc_norm(h2)))
        return z, [h0, h1, h2]

    def decode_raw(
        self,
        z: torch.Tensor,
        wrap=None,
        taps: list | None = None,
    ) -> torch.Tensor:
        """Unclamped decoder; ``wrap(scale, F_d) -> F_m`` injects at each scale."""

        def inject(scale: int, feat: torch.Tensor) -> torch.Tensor:
            out = feat if wrap is None else wrap(scale, feat)
            if taps is not None:
                taps.append((scale, feat, out))
            return out

        d2 = inject(2, self.dec2(self.dec_in(z)))
        d1 = inject(1, self.dec1(self.dec_up1(F.interpolate(d2, scale_factor=2, mode="nearest"))))
        d0 = inject(0, self.dec0(self.dec_up0(F.interpolate(d1, scale_factor=2, mode="nearest"))))
        y = self.dec_out(F.silu(self.dec_norm(d0)))
        return (y + 1.0) / 2.0


class CFW(nn.Module):
    """Per-scale ``C(F_e, F_d)``: two convs over the channel concatenation, last zero-init."""

    def __init__(self, arch: AEArch = AEArch()):
        super().__init__()
        self.arch = arch
        self.convs = nn.ModuleList()
        for c in arch.widths:
            seq = nn.Sequential(_conv(2 * c, c), nn.SiLU(), _conv(c, c))
            he_init(seq)
            zero_module(seq[2])
            self.convs.append(seq)

    def delta(self, scale: int, f_e: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
        if f_e.shape != f_d.shape:
            raise ValueError(f"encoder/decoder feature mismatch at scale {scale}: {tuple(f_e.shape)} vs {tuple(f_d.shape)}")
        return self.convs[scale](torch.cat([f_e, f_d], dim=1))


def clamp_w(w: float) -> float:
    return min(1.0, max(0.0, float(w)))


def ae_encode(ae_params: Autoencoder, img: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Image in [0,1], (B,3,H,W) -> scaled latent (B,4,H/4,W/4) and encoder features."""
    z, feats = ae_params.encode_raw(img)
    return z * ae_params.latent_scale, feats


def _wrap_fn(cfw_params: CFW, f_e: Sequence[torch.Tensor], w: float):
    def wrap(scale: int, f_d: torch.Tensor) -> torch.Tensor:
        return f_d + cfw_params.delta(scale, f_e[scale], f_d) * w

    return wrap


def decode_unclamped(
    ae_params: Autoencoder,
    cfw_params: CFW | None,
    z: torch.Tensor,
    f_e: Sequence[torch.Tensor] | None = None,
    w: float = 0.0,
    taps: list | None = None,
) -> torch.Tensor:
    w = clamp_w(w)
    if w > 0 and f_e is None:
        raise ValueError("encoder features are required when w > 0")
    if w > 0 and cfw_params is None:
        raise ValueError("CFW parameters are required when w > 0")
    wrap = None if w == 0 or f_e is None else _wrap_fn(cfw_params, f_e, w)
    return ae_params.decode_raw(z / ae_params.latent_scale, wrap=wrap, taps=taps)


def ae_decode_cfw(
    ae_params: Autoencoder,
    cfw_params: CFW | None,
    z: torch.Tensor,
    f_e: Sequence[torch.Tensor] | None = None,
    w: float = 0.5,
    taps: list | None = None,
) -> torch.Tensor:
    """Decode a scaled latent, blending ``F_d + C(F_e, F_d) * w`` at every decoder scale.

    ``w`` is clamped to [0, 1]. ``w == 0`` or ``f_e is None`` runs the plain
    decoder. Output is clamped to [0, 1].
    """
    return decode_unclamped(ae_params, cfw_params, z, f_e, w, taps).clamp(0.0, 1.0)


def pixel_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.l1_loss(pred, target) + F.mse_loss(pred, target)


@torch.no_grad()
def calibrate_latent_scale(ae_params: Autoencoder, images: torch.Tensor, chunk: int = 64) -> float:
    zs = [ae_params.encode_raw(images[i:i + chunk])[0] for i in range(0, images.shape[0], chunk)]
    std = float(torch.cat(zs).std())
    ae_params.latent_scale.fill_(1.0 / max(std, 1e-6))
    return float(ae_params.latent_scale)


def train_autoencoder(
    ae_params: Autoencoder,
    images: torch.Tensor,
    cfg: OptimConfig,
    steps: int,
    log_every: int = 0,
) -> TrainLog:
    """Pixel L1 + MSE reconstruction; recalibrates ``latent_scale`` afterwards."""
    if images.shape[0] == 0:
        raise ValueError("empty image dataset")
    trainable = [p for _, p in trainable_parameters(ae_params)]

    def loss_fn(step: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, images.shape[0], (cfg.batch_size,), generator=gen)
        x = images[idx]
        z, _ = ae_params.encode_raw(x)
        return pixel_loss(ae_params.decode_raw(z), x)

    ae_params.train()
    history = fit(trainable, loss_fn, steps, cfg, log_every=log_every, name="autoencoder")
    if steps > 0:
        calibrate_latent_scale(ae_params, images)
    return history


def train_cfw(
    cfw_params: CFW,
    ae_params: Autoencoder,
    latents: torch.Tensor,
    lr_images: torch.Tensor,
    hr_images: torch.Tensor,
    cfg: OptimConfig,
    steps: int,
    w: float = 1.0,
    log_every: int = 0,
    crop: int | None = None,
) -> TrainLog:
    """Train only ``C`` to map sampled latents + LR encoder features to HR pixels.

    ``latents`` are the restored latents produced by the conditioned sampler
    for ``lr_images``; the autoencoder stays frozen. ``crop`` (pixels, a
    multiple of 4) trains on aligned random windows instead of full images.
    """
    if crop is not None and crop % 4:
        raise ValueError(f"crop must be a multiple of 4, got {crop}")
    before = params_digest(ae_params)
    trainable_parameters(ae_params, frozen=[n for n, _ in ae_params.named_parameters()])
    trainable = [p for _, p in trainable_parameters(cfw_params)]
    ae_params.eval()
    with torch.no_grad():
        feats = [ae_params.encode_raw(lr_images[i:i + 64])[1] for i in range(0, lr_images.shape[0], 64)]
        feats = [torch.cat([f[s] for f in feats]) for s in range(3)]

    h, wd = hr_images.shape[-2:]
    windowed = crop is not None and crop < min(h, wd)

    def loss_fn(step: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, latents.shape[0], (cfg.batch_size,), generator=gen)
        z, f_e, target = latents[idx], [f[idx] for f in feats], hr_images[idx]
        if windowed:
            # one latent-aligned window per batch; scale s features are 2**s coarser
            r = int(torch.randint(0, (h - crop) // 4 + 1, (), generator=gen)) * 4
            c = int(torch.randint(0, (wd - crop) // 4 + 1, (), generator=gen)) * 4
            z = z[..., r // 4:(r + crop) // 4, c // 4:(c + crop) // 4]
            f_e = [f[..., r >> s:(r + crop) >> s, c >> s:(c + crop) >> s] for s, f in enumerate(f_e)]
            target = target[..., r:r + crop, c:c + crop]
        return pixel_loss(decode_unclamped(ae_params, cfw_params, z, f_e, w), target)

    cfw_params.train()
    history = fit(trainable, loss_fn, steps, cfg, log_every=log_every, name="cfw")
    if params_digest(ae_params) != before:
        raise DivergenceError("autoencoder parameters changed during CFW training")
    return history
