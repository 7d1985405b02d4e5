"""Shared optimisation loop, freeze handling and parameter fingerprints."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import torch
from torch import nn

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the loss stays above 10x its initial value for too long."""


@dataclass
class OptimConfig:
    lr: float = 5e-5
    batch_size: int = 16
    seed: int = 0
    grad_clip: float | None = 1.0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    # "constant" or "cosine" (anneal to zero over the run)
    lr_schedule: str = "constant"


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]

    def smoothed(self, window: int = 50) -> tuple[float, float]:
        """Mean loss over the first and last ``window`` steps."""
        w = max(1, min(window, len(self.losses)))
        first = sum(self.losses[:w]) / w
        last = sum(self.losses[-w:]) / w
        return first, last


def params_digest(module: nn.Module | dict[str, torch.Tensor], names: Iterable[str] | None = None) -> str:
    """SHA-256 over raw tensor bytes, in sorted-name order."""
    state = module.state_dict() if isinstance(module, nn.Module) else module
    keys = sorted(state) if names is None else sorted(names)
    h = hashlib.sha256()
    for k in keys:
        t = state[k].detach().contiguous().cpu()
        h.update(k.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def trainable_parameters(module: nn.Module, frozen: Iterable[str] = ()) -> list[tuple[str, nn.Parameter]]:
    """Mark frozen names ``requires_grad=False`` and return the rest."""
    frozen = set(frozen)
    unknown = frozen - {n for n, _ in module.named_parameters()}
    if unknown:
        raise KeyError(f"unknown frozen parameter names: {sorted(unknown)}")
    out = []
    for name, p in module.named_parameters():
        p.requires_grad_(name not in frozen)
        if name not in frozen:
            out.append((name, p))
    return out


def fit(
    params: list[nn.Parameter],
    loss_fn: Callable[[int, torch.Generator], torch.Tensor],
    steps: int,
    cfg: OptimConfig,
    log_every: int = 0,
    name: str = "train",
) -> TrainLog:
    """Adam loop over ``loss_fn(step, generator)`` with the divergence guard.

    An empty ``params`` list (everything frozen) still evaluates the loss so
    the log is meaningful, but no tensor is touched.
    """
    history = TrainLog()
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr) if params else None
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    sched = None
    if opt is not None and cfg.lr_schedule == "cosine" and steps > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    over = 0
    for step in range(steps):
        if opt is not None:
            opt.zero_grad(set_to_none=True)
        loss = loss_fn(step, gen)
        value = float(loss.detach())
        if not torch.isfinite(loss):
            raise DivergenceError(f"{name}: non-finite loss at step {step}")
        if opt is not None:
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
        history.losses.append(value)
        if value > cfg.divergence_factor * history.initial:
            over += 1
            if over >= cfg.divergence_patience:
                raise DivergenceError(
                    f"{name}: loss above {cfg.divergence_factor}x initial for {over} steps"
                )
        else:
            over = 0
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.6f", name, step, value)
    return history
