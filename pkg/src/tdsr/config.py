"""Run configuration: nested dataclasses loaded from YAML, unknown keys rejected."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class ModelConfig:
    prior_widths: tuple[int, int] = (32, 64)
    encoder_widths: tuple[int, int] = (16, 32)
    ae_widths: tuple[int, int, int] = (32, 64, 64)
    # False pins the encoder's timestep input (the time-blind ablation)
    time_aware: bool = True
    # prior output skip sqrt(1 - abar) z + sqrt(abar) net; False gives a bare eps head
    prior_skip: bool = True


@dataclass
class DataConfig:
    n_train: int = 256
    n_val: int = 16
    size: int = 64
    seed: int = 0
    val_seed: int = 1000
    # first-order Real-ESRGAN ranges: blur sigma in HR pixels, noise sigma 1/255 to 30/255
    blur_sigma: tuple[float, float] = (0.2, 3.0)
    noise_sigma: tuple[float, float] = (1 / 255, 30 / 255)
    factor: int = 4


@dataclass
class StageConfig:
    steps: int
    lr: float
    batch_size: int = 16
    seed: int = 0
    lr_schedule: str = "cosine"


@dataclass
class TrainConfig:
    autoencoder: StageConfig = field(default_factory=lambda: StageConfig(steps=1500, lr=2e-3))
    prior: StageConfig = field(default_factory=lambda: StageConfig(steps=2000, lr=1e-3))
    encoder: StageConfig = field(default_factory=lambda: StageConfig(steps=1500, lr=1e-3))
    cfw: StageConfig = field(default_factory=lambda: StageConfig(steps=1500, lr=1e-3))
    # crop side for autoencoder training; the network is fully convolutional
    ae_crop: int = 32
    cfw_crop: int = 32
    # sampler steps used to produce the latents CFW is trained on
    cfw_sample_steps: int = 50


@dataclass
class SamplingConfig:
    steps: int = 200
    seed: int = 0
    tile_size: int = 16
    tile_overlap: int = 8
    tile_sigma: float | None = None
    w: float = 0.5
    guidance_scale: float = 1.0
    color: str = "pixel"
    wavelet_levels: int = 3
    preclean: bool = False
    scale: int = 4


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def validate(self) -> "RunConfig":
        s = self.sampling
        if not 0.0 <= s.w <= 1.0:
            raise ConfigError(f"sampling.w must lie in [0, 1], got {s.w}")
        if s.guidance_scale < 0:
            raise ConfigError(f"sampling.guidance_scale must be >= 0, got {s.guidance_scale}")
        if s.color not in ("pixel", "wavelet", "none"):
            raise ConfigError(f"sampling.color must be pixel, wavelet or none, got {s.color!r}")
        if not 1 <= s.steps <= self.schedule.T:
            raise ConfigError(f"sampling.steps must lie in [1, T={self.schedule.T}], got {s.steps}")
        if not 0 < s.tile_overlap < s.tile_size:
            raise ConfigError(f"tile_overlap must lie in (0, tile_size), got {s.tile_overlap}")
        if s.tile_sigma is not None and s.tile_sigma <= 0:
            raise ConfigError(f"tile_sigma must be positive, got {s.tile_sigma}")
        if s.scale < 1 or s.wavelet_levels < 1:
            raise ConfigError("scale and wavelet_levels must be >= 1")
        sc = self.schedule
        if sc.T < 1 or not 0 < sc.beta_start <= sc.beta_end < 1:
            raise ConfigError(f"invalid schedule {sc}")
        m = self.model
        for name in ("prior_widths", "encoder_widths", "ae_widths"):
            if any(c < 8 or c % 8 for c in getattr(m, name)):
                raise ConfigError(f"model.{name} entries must be positive multiples of 8")
        d = self.data
        if d.size % 4 or d.size % d.factor:
            raise ConfigError(f"data.size must be divisible by 4 and by factor, got {d.size}")
        if d.n_train < 1:
            raise ConfigError("data.n_train must be >= 1")
        for name in ("blur_sigma", "noise_sigma"):
            lo, hi = getattr(d, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"data.{name} must be a non-negative range")
        if self.train.ae_crop % 4 or self.train.cfw_crop % 4 or self.train.ae_crop < 4 or self.train.cfw_crop < 4:
            raise ConfigError("train.ae_crop and train.cfw_crop must be positive multiples of 4")
        if self.train.cfw_sample_steps < 1 or self.train.cfw_sample_steps > sc.T:
            raise ConfigError(f"train.cfw_sample_steps must lie in [1, T={sc.T}]")
        for name in ("autoencoder", "prior", "encoder", "cfw"):
            st = getattr(self.train, name)
            if st.steps < 0 or st.lr <= 0 or st.batch_size < 1 or st.lr_schedule not in ("constant", "cosine"):
                raise ConfigError(f"invalid train.{name}: {st}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(default: Any, data: Any, path: str) -> Any:
    """Merge ``data`` onto the dataclass instance ``default``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, sub)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                raise ConfigError(f"{sub} must be a list of {len(current)} numbers")
            kwargs[name] = tuple(_scalar(c, v, sub) for c, v in zip(current, value))
        else:
            kwargs[name] = _scalar(current, value, sub)
    return dataclasses.replace(default, **kwargs)


def _scalar(current: Any, value: Any, path: str) -> Any:
    numeric = isinstance(value, (int, float)) and not isinstance(value, bool)
    if current is None:
        if value is None or numeric:
            return value
    elif isinstance(current, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(current, int):
        if numeric and float(value).is_integer():
            return int(value)
    elif isinstance(current, float):
        if numeric:
            return float(value)
    elif isinstance(current, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"{path}: expected {type(current).__name__}, got {value!r}")


def from_dict(data: dict[str, Any] | None) -> RunConfig:
    try:
        cfg = _build(RunConfig(), data or {}, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides such as ``{"sampling.w": 0.8}``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.get(p) if isinstance(node, dict) else None
            if node is None:
                raise ConfigError(f"unknown key {key}")
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown key {key}")
        node[leaf] = value
    return from_dict(data)


def _plain(node: Any) -> Any:
    if isinstance(node, dict):
        return {k: _plain(v) for k, v in node.items()}
    if isinstance(node, tuple):
        return list(node)
    return node


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    data = _plain(cfg.to_dict())
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
