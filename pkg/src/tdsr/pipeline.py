"""Staged training and end-to-end restoration built from the individual modules."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .aggregation import PatchLayout, grid_tiles, plan_patches, progressive_sample
from .autoencoder import AEArch, CFW, Autoencoder, ae_decode_cfw, ae_encode, calibrate_latent_scale, train_autoencoder, train_cfw
from .color import color_correct
from .config import DataConfig, ModelConfig, RunConfig, SamplingConfig, ScheduleConfig, StageConfig
from .degradation import DegradationParams, degrade_lr, preclean, upsample
from .diffusion import NoiseSchedule, guided_predictor, make_schedule, sample
from .encoder import NEGATIVE_PROMPT, NULL_PROMPT, Condition, ConditionedPredictor, EncoderArch, TimeAwareEncoder, finetune_encoder
from .prior import PriorArch, PriorUNet, train_prior
from .training import OptimConfig, TrainLog

log = logging.getLogger(__name__)


def to_tensor(imgs: np.ndarray) -> torch.Tensor:
    """``(N, H, W, 3)`` or ``(H, W, 3)`` array -> ``(N, 3, H, W)`` float32 tensor."""
    arr = np.asarray(imgs, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def optim_of(st: StageConfig) -> OptimConfig:
    return OptimConfig(lr=st.lr, batch_size=st.batch_size, seed=st.seed, lr_schedule=st.lr_schedule)


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def degradation_of(d: DataConfig) -> DegradationParams:
    return DegradationParams(blur_sigma=d.blur_sigma, factor=d.factor, noise_sigma=d.noise_sigma)


@dataclass
class Pairs:
    hr: np.ndarray
    lr: np.ndarray
    lr_up: np.ndarray
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.hr)


def make_pairs(hr: np.ndarray, d: DataConfig, seed: int) -> Pairs:
    params = degradation_of(d)
    seeds = [pair_seed(seed, i) for i in range(len(hr))]
    lr = np.stack([degrade_lr(img, params, s) for img, s in zip(hr, seeds)])
    lr_up = np.stack([upsample(x, d.factor) for x in lr])
    return Pairs(hr=hr, lr=lr, lr_up=lr_up, seeds=seeds)


@dataclass
class Models:
    ae: Autoencoder
    cfw: CFW
    prior: PriorUNet
    encoder: TimeAwareEncoder

    @classmethod
    def fresh(
        cls,
        seed: int = 0,
        model: ModelConfig | None = None,
        time_aware: bool | None = None,
        schedule: ScheduleConfig | None = None,
    ) -> "Models":
        m = model or ModelConfig()
        sc = schedule or ScheduleConfig()
        aware = m.time_aware if time_aware is None else time_aware
        ae_arch = AEArch(widths=tuple(m.ae_widths))
        skip = (sc.T, sc.beta_start, sc.beta_end) if m.prior_skip else None
        torch.manual_seed(seed)
        return cls(
            ae=Autoencoder(ae_arch),
            cfw=CFW(ae_arch),
            prior=PriorUNet(PriorArch(widths=tuple(m.prior_widths), skip_schedule=skip)),
            encoder=TimeAwareEncoder(
                EncoderArch(widths=tuple(m.encoder_widths), prior_widths=tuple(m.prior_widths), time_aware=aware)
            ),
        )

    def state(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, module in (("ae", self.ae), ("cfw", self.cfw), ("prior", self.prior), ("encoder", self.encoder)):
            for k, v in module.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_state(self, state: dict[str, torch.Tensor], prefixes=("ae", "cfw", "prior", "encoder")) -> None:
        for prefix in prefixes:
            module = getattr(self, prefix)
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            if sub:
                module.load_state_dict(sub)


@torch.no_grad()
def encode_images(ae: Autoencoder, imgs: np.ndarray | torch.Tensor, chunk: int = 64) -> torch.Tensor:
    x = imgs if torch.is_tensor(imgs) else to_tensor(imgs)
    ae.eval()
    return torch.cat([ae_encode(ae, x[i:i + chunk])[0] for i in range(0, x.shape[0], chunk)])


def random_crops(images: torch.Tensor, crop: int, seed: int) -> torch.Tensor:
    """Fixed pool of 4-aligned crops, four per image."""
    if crop >= images.shape[-1]:
        return images
    gen = torch.Generator().manual_seed(seed)
    n, _, h, w = images.shape
    out = []
    for _ in range(4):
        r = torch.randint(0, (h - crop) // 4 + 1, (n,), generator=gen) * 4
        c = torch.randint(0, (w - crop) // 4 + 1, (n,), generator=gen) * 4
        out.append(torch.stack([images[i, :, r[i]:r[i] + crop, c[i]:c[i] + crop] for i in range(n)]))
    return torch.cat(out)


def stage_autoencoder(models: Models, hr: np.ndarray, cfg: RunConfig, log_every: int = 0) -> TrainLog:
    st = cfg.train.autoencoder
    images = to_tensor(hr)
    history = train_autoencoder(
        models.ae, random_crops(images, cfg.train.ae_crop, st.seed), optim_of(st), st.steps, log_every
    )
    if st.steps > 0:
        # recalibrate on full-size images so the scale matches inference
        calibrate_latent_scale(models.ae, images)
    return history


def stage_prior(models: Models, hr_latents: torch.Tensor, schedule: NoiseSchedule, cfg: RunConfig, log_every: int = 0) -> TrainLog:
    st = cfg.train.prior
    return train_prior(models.prior, hr_latents, schedule, optim_of(st), st.steps, log_every=log_every)


def stage_encoder(
    models: Models,
    lr_latents: torch.Tensor,
    hr_latents: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    log_every: int = 0,
) -> TrainLog:
    st = cfg.train.encoder
    return finetune_encoder(models.prior, models.encoder, lr_latents, hr_latents, schedule, optim_of(st), st.steps, log_every)


@torch.no_grad()
def sample_training_latents(models: Models, lr_latents: torch.Tensor, schedule: NoiseSchedule, steps: int, seed: int, chunk: int = 64) -> torch.Tensor:
    predictor = ConditionedPredictor(models.prior, models.encoder)
    out = []
    for k, i in enumerate(range(0, lr_latents.shape[0], chunk)):
        lat = lr_latents[i:i + chunk]
        out.append(sample(predictor, Condition(lat), schedule, steps, seed + k, tuple(lat.shape)))
    return torch.cat(out)


def stage_cfw(models: Models, pairs: Pairs, schedule: NoiseSchedule, cfg: RunConfig, log_every: int = 0) -> TrainLog:
    st = cfg.train.cfw
    lr_up = to_tensor(pairs.lr_up)
    lr_latents = encode_images(models.ae, lr_up)
    latents = sample_training_latents(models, lr_latents, schedule, cfg.train.cfw_sample_steps, st.seed)
    return train_cfw(models.cfw, models.ae, latents, lr_up, to_tensor(pairs.hr), optim_of(st), st.steps, w=1.0, log_every=log_every,
                     crop=cfg.train.cfw_crop)


def layout_for(h: int, w: int, s: SamplingConfig) -> PatchLayout:
    p = min(s.tile_size, h, w)
    overlap = min(s.tile_overlap, p - 1)
    return plan_patches(h, w, p, max(overlap, 1), s.tile_sigma)


def make_predictor(models: Models, guidance_scale: float, guidance: bool = True):
    base = ConditionedPredictor(models.prior, models.encoder)
    if not guidance or guidance_scale == 1.0:
        return base
    return guided_predictor(base, guidance_scale, NEGATIVE_PROMPT, NULL_PROMPT)


def prepare_inputs(lr: np.ndarray, s: SamplingConfig) -> np.ndarray:
    """Optional pre-cleaning then bicubic upsampling to output size."""
    lr = np.asarray(lr, dtype=np.float32)
    if lr.ndim == 3:
        lr = lr[None]
    if s.preclean:
        lr = np.stack([preclean(x) for x in lr])
    return np.stack([upsample(x, s.scale) for x in lr])


@torch.no_grad()
def sample_latents(
    models: Models,
    x_up: np.ndarray,
    schedule: NoiseSchedule,
    s: SamplingConfig,
    seed: int | None = None,
    guidance: bool = True,
    tiled: bool = True,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Restored latents for a batch of upsampled inputs, plus their encoder features."""
    models.ae.eval()
    x = to_tensor(x_up)
    lr_latent, feats = ae_encode(models.ae, x)
    predictor = make_predictor(models, s.guidance_scale, guidance)
    cond = Condition(lr_latent)
    seed = s.seed if seed is None else seed
    h, w = lr_latent.shape[-2:]
    if tiled:
        z = progressive_sample(predictor, cond, layout_for(h, w, s), schedule, s.steps, seed)
    else:
        z = sample(predictor, cond, schedule, s.steps, seed, tuple(lr_latent.shape))
    return z, feats


@torch.no_grad()
def decode(models: Models, z: torch.Tensor, feats, x_up: np.ndarray, w: float, color: str, levels: int = 3) -> np.ndarray:
    models.ae.eval()
    models.cfw.eval()
    y = to_images(ae_decode_cfw(models.ae, models.cfw, z, feats, w))
    x_up = np.asarray(x_up, dtype=np.float64).reshape(y.shape)
    return np.stack([color_correct(yi, xi, color, levels) for yi, xi in zip(y, x_up)])


def restore(
    models: Models,
    lr: np.ndarray,
    schedule: NoiseSchedule,
    s: SamplingConfig,
    guidance: bool = True,
    tiled: bool = True,
) -> np.ndarray:
    """Full pipeline on one LR image ``(h, w, 3)`` or a same-size batch."""
    x_up = prepare_inputs(lr, s)
    z, feats = sample_latents(models, x_up, schedule, s, guidance=guidance, tiled=tiled)
    out = decode(models, z, feats, x_up, s.w, s.color, s.wavelet_levels)
    return out[0] if np.asarray(lr).ndim == 3 else out


def naive_tiled_latents(models: Models, x_up: np.ndarray, schedule: NoiseSchedule, s: SamplingConfig, seed: int) -> torch.Tensor:
    """Independent non-overlapping tiles stitched together (the seam baseline)."""
    x = to_tensor(x_up)
    lr_latent, _ = ae_encode(models.ae, x)
    h, w = lr_latent.shape[-2:]
    predictor = make_predictor(models, s.guidance_scale)
    return progressive_sample(predictor, Condition(lr_latent), grid_tiles(h, w, s.tile_size), schedule, s.steps, seed)


def train_all(models: Models, pairs: Pairs, cfg: RunConfig, log_every: int = 0) -> dict[str, TrainLog]:
    """The four stages in dependency order: autoencoder, prior, encoder, CFW."""
    schedule = schedule_of(cfg)
    logs = {"autoencoder": stage_autoencoder(models, pairs.hr, cfg, log_every)}
    hr_latents = encode_images(models.ae, pairs.hr)
    lr_latents = encode_images(models.ae, pairs.lr_up)
    logs["prior"] = stage_prior(models, hr_latents, schedule, cfg, log_every)
    logs["encoder"] = stage_encoder(models, lr_latents, hr_latents, schedule, cfg, log_every)
    logs["cfw"] = stage_cfw(models, pairs, schedule, cfg, log_every)
    return logs
