"""Noise schedule, forward noising, DDIM updates and classifier-free guidance."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import NumericalError, RngStream, ShapeError, Tensor


@dataclass(frozen=True)
class Schedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """``alpha_bar[t]``; any negative ``t`` denotes the clean end, where it is 1."""
        if t < 0:
            return 1.0
        if t >= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])

    def alpha_bar_tensor(self, t: Tensor) -> Tensor:
        table = torch.as_tensor(self.alpha_bar, dtype=torch.float64)
        return table[t.long()]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    guidance_scale: float = 1.5
    eta: float = 0.0
    seed: int = 0

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must lie in [1, {T}], got {self.steps}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> Schedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1 or not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"invalid schedule: T={T}, beta in [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return Schedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _per_sample(coef: Tensor | float, like: Tensor) -> Tensor | float:
    if isinstance(coef, Tensor) and coef.dim() == 1 and like.dim() > 1:
        return coef.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return coef


def add_noise(z0: Tensor, t: int | Tensor, eps: Tensor, sched: Schedule) -> Tensor:
    """Forward-noise ``z0`` to timestep ``t``; ``t`` may be one timestep per batch row."""
    if z0.shape != eps.shape:
        raise ShapeError("add_noise", z0.shape, eps.shape)
    if isinstance(t, Tensor):
        ab = _per_sample(sched.alpha_bar_tensor(t), z0)
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} outside [0, {sched.T})")
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def ddim_update(z_t: Tensor, eps_pred: Tensor, alpha_bar_t: float, alpha_bar_prev: float,
                eta: float = 0.0, noise: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One DDIM move expressed in cumulative-alpha terms. Returns ``(z_prev, z0_hat)``."""
    if z_t.shape != eps_pred.shape:
        raise ShapeError("ddim_step", z_t.shape, eps_pred.shape)
    if alpha_bar_t <= 0.0:
        raise NumericalError("ddim_step: alpha_bar_t is zero, cannot recover z0")
    z0_hat = (z_t - math.sqrt(1.0 - alpha_bar_t) * eps_pred) / math.sqrt(alpha_bar_t)
    sigma = 0.0
    if eta > 0.0:
        sigma = eta * math.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * math.sqrt(1.0 - alpha_bar_t / alpha_bar_prev)
    z_prev = math.sqrt(alpha_bar_prev) * z0_hat
    direction = math.sqrt(max(1.0 - alpha_bar_prev - sigma**2, 0.0))
    if direction > 0.0:
        z_prev = z_prev + direction * eps_pred
    if sigma > 0.0:
        if noise is None:
            raise ValueError("ddim_step: eta > 0 requires a noise tensor")
        z_prev = z_prev + sigma * noise
    return z_prev, z0_hat


def ddim_step(z_t: Tensor, eps_pred: Tensor, t: int, t_prev: int, sched: Schedule,
              eta: float = 0.0, noise: Tensor | None = None) -> Tensor:
    """DDIM step from ``t`` to ``t_prev``; ``t_prev = -1`` lands on the clean latent."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must precede t ({t})")
    z_prev, _ = ddim_update(z_t, eps_pred, sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev), eta, noise)
    return z_prev


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, s: float) -> Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("cfg_combine", eps_cond.shape, eps_uncond.shape)
    # Exact at the endpoints; the affine form rounds at s == 1.
    if s == 1.0:
        return eps_cond
    if s == 0.0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


def timestep_grid(T: int, steps: int) -> list[int]:
    """Descending timesteps with uniform stride, starting at ``T - 1``."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    stride = T / steps
    return [int(round(T - i * stride)) - 1 for i in range(steps)]


EpsFn = Callable[[Tensor, Tensor, Tensor | None], Tensor]


@torch.no_grad()
def sample(eps_fn: EpsFn, ctx: Tensor, null_ctx: Tensor, shape: tuple[int, ...], cfg: SamplerConfig,
           sched: Schedule, conditional_only: bool = False) -> Tensor:
    """Run ``cfg.steps`` DDIM iterations from unit-normal noise.

    ``eps_fn(z_t, t, ctx)`` is the noise predictor with any background
    control already bound. Each iteration evaluates it with ``ctx`` and,
    unless ``conditional_only``, with ``null_ctx``; predictions are merged by
    :func:`cfg_combine`. The final step jumps to alpha_bar = 1.
    """
    cfg.validate(sched.T)
    rng = RngStream(cfg.seed, ("sample",))
    z = rng.child("z_T").normal(shape)
    grid = timestep_grid(sched.T, cfg.steps)
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else -1
        tt = torch.full((shape[0],), t, dtype=torch.long)
        eps = eps_fn(z, tt, ctx)
        if not conditional_only:
            eps = cfg_combine(eps, eps_fn(z, tt, null_ctx), cfg.guidance_scale)
        noise = rng.child("eta", i).normal(shape) if cfg.eta > 0 else None
        z = ddim_step(z, eps, t, t_prev, sched, cfg.eta, noise)
        if not torch.isfinite(z).all():
            raise NumericalError(f"sample: non-finite latent at step {i} (t={t})")
    return z
