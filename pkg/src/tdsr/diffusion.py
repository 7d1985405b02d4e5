"""DDPM machinery: schedules, forward noising, reverse stepping and guidance.

Timesteps are 1-based (``1 <= t <= T``); array index ``t - 1`` holds the value
for timestep ``t``. The convention ``alpha_bar_0 = 1`` makes the last reverse
step deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

# eps predictor: (z_t, t, cond) -> predicted noise, same shape as z_t
Predictor = Callable[[torch.Tensor, int, object], torch.Tensor]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with float64 tables.

    alpha_bar is a sequential running product, so
    ``alpha_bar[t] == alpha_bar[t-1] * alpha[t]`` holds exactly.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T, dtype=np.float64)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc = acc * a
        alpha_bar[i] = acc
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def schedule_from_alpha_bar(alpha_bar: Sequence[float]) -> NoiseSchedule:
    ab = np.asarray(alpha_bar, dtype=np.float64)
    prev = np.concatenate([[1.0], ab[:-1]])
    alpha = ab / prev
    return NoiseSchedule(beta=1.0 - alpha, alpha=alpha, alpha_bar=ab)


def respace(schedule: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, list[int]]:
    """Sub-sample ``steps`` evenly strided timesteps ending at T.

    Returns the respaced schedule (whose step i corresponds to original
    timestep ``timesteps[i - 1]``) and the original timesteps, ascending.
    """
    T = schedule.T
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must lie in [1, {T}], got {steps}")
    if steps == T:
        return schedule, list(range(1, T + 1))
    timesteps = [((k + 1) * T) // steps for k in range(steps)]
    return schedule_from_alpha_bar(schedule.alpha_bar[np.array(timesteps) - 1]), timesteps


def snr(schedule: NoiseSchedule, t: int) -> float:
    schedule.check_t(t)
    ab = float(schedule.alpha_bar[t - 1])
    return ab / (1.0 - ab)


def first_t_below_snr(schedule: NoiseSchedule, level: float = 5e-2) -> int:
    """Smallest timestep whose SNR is below ``level`` (linear scan)."""
    for t in range(1, schedule.T + 1):
        if snr(schedule, t) < level:
            return t
    raise ScheduleError(f"SNR never drops below {level}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; ``t = 0`` returns x0."""
    _check_same_shape(x0, eps, "q_sample")
    if t == 0:
        return x0.clone()
    schedule.check_t(t)
    ab = float(schedule.alpha_bar[t - 1])
    return ab ** 0.5 * x0 + (1.0 - ab) ** 0.5 * eps


def q_sample_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Batched forward process with one timestep per leading-axis item."""
    _check_same_shape(x0, eps, "q_sample_batch")
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t - 1]
    ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def posterior_sigma(schedule: NoiseSchedule, t: int) -> float:
    schedule.check_t(t)
    ab = float(schedule.alpha_bar[t - 1])
    return ((1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab) * float(schedule.beta[t - 1])) ** 0.5


def ddpm_step(
    z_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step z_t -> z_{t-1} with the posterior variance."""
    schedule.check_t(t)
    _check_same_shape(z_t, eps_pred, "ddpm_step")
    if noise is not None:
        if t == 1:
            raise ValueError("noise must be None at t = 1")
        _check_same_shape(z_t, noise, "ddpm_step noise")
    alpha = float(schedule.alpha[t - 1])
    beta = float(schedule.beta[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    mean = (z_t - (beta / (1.0 - ab) ** 0.5) * eps_pred) / alpha ** 0.5
    if noise is None:
        return mean
    return mean + posterior_sigma(schedule, t) * noise


def cfg_combine(eps_cond: torch.Tensor, eps_null: torch.Tensor, s: float) -> torch.Tensor:
    """Guided estimate ``eps_cond + s * (eps_null - eps_cond)``.

    Evaluated in the algebraically equal form ``(1 - s) * eps_cond + s * eps_null``
    so that s = 0 and s = 1 return the respective branch bit for bit.
    """
    _check_same_shape(eps_cond, eps_null, "cfg_combine")
    if s < 0:
        raise ValueError(f"guidance scale must be >= 0, got {s}")
    return (1.0 - s) * eps_cond + s * eps_null


def guided_predictor(predictor: Predictor, s: float, cond_prompt: int, null_prompt: int) -> Predictor:
    """Wrap a predictor so every call combines a conditioned and a null branch.

    The condition handle must provide ``with_prompt(prompt_id)``.
    """

    def _guided(z: torch.Tensor, t: int, cond) -> torch.Tensor:
        eps_c = predictor(z, t, cond.with_prompt(cond_prompt))
        eps_n = predictor(z, t, cond.with_prompt(null_prompt))
        return cfg_combine(eps_c, eps_n, s)

    return _guided


def run_reverse(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Sequence[int],
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Shared reverse loop; ``eps_fn(z, t)`` receives original-schedule timesteps.

    All noise is drawn on the full grid from one seeded generator: the initial
    state first, then one draw per stochastic step.
    """
    sched, timesteps = respace(schedule, steps)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    for i in range(len(timesteps), 0, -1):
        eps = eps_fn(z, timesteps[i - 1])
        noise = torch.randn(tuple(shape), generator=gen, dtype=dtype) if i > 1 else None
        if on_step is not None:
            on_step(timesteps[i - 1], noise)
        z = ddpm_step(z, eps, i, sched, noise)
    return z


@torch.no_grad()
def sample(
    predictor: Predictor,
    cond,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    shape: Sequence[int],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral DDPM sampling from pure noise, deterministic per seed."""
    return run_reverse(lambda z, t: predictor(z, t, cond), shape, schedule, steps, seed, dtype)
