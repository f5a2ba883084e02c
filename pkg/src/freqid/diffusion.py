"""Noise schedule, the epsilon-prediction objective, guidance and a DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgumentError, NumericDivergenceError


@dataclass
class NoiseSchedule:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: str = "linear"
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_steps < 1:
            raise InvalidArgumentError("schedule needs at least one step")
        if self.kind == "linear":
            self.betas = np.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=np.float64)
        elif self.kind == "scaled_linear":
            self.betas = np.linspace(self.beta_start**0.5, self.beta_end**0.5, self.num_steps, dtype=np.float64) ** 2
        elif self.kind == "cosine":
            # betas from a squared-cosine alpha_bar curve, capped at 0.999
            s = 0.008
            f = np.cos((np.arange(self.num_steps + 1) / self.num_steps + s) / (1 + s) * np.pi / 2) ** 2
            self.betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
        else:
            raise InvalidArgumentError(f"unknown schedule kind {self.kind!r}")
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise InvalidArgumentError("betas must lie in (0, 1)")
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.num_steps):
            raise InvalidArgumentError(f"timestep outside [0, {self.num_steps})")
        return t

    def q_sample(self, x0, t, eps):
        """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` scalar or per batch row."""
        if tuple(eps.shape) != tuple(x0.shape):
            raise InvalidArgumentError("eps must match x0 in shape")
        t = self._check(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
        ab = self.alpha_bars[t]
        if ab.ndim:
            ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
        if isinstance(x0, torch.Tensor):
            ab = torch.as_tensor(ab, dtype=x0.dtype)
            return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def substeps(self, steps):
        if not 1 <= steps <= self.num_steps:
            raise InvalidArgumentError(f"steps must be in [1, {self.num_steps}]")
        return np.round(np.linspace(self.num_steps - 1, 0, steps)).astype(np.int64)


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 6.0
    seed: int = 0
    clip_denoised: bool = True


def training_loss(model, x0, text, conditioning, rng, schedule: NoiseSchedule):
    """Plain denoising MSE with t ~ U{0..T-1} and eps ~ N(0, I) drawn from ``rng``.

    ``model(x_t, t, text, conditioning)`` returns the epsilon prediction.
    """
    B = x0.shape[0]
    t = rng.integers(0, schedule.num_steps, size=B)
    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
    x_t = schedule.q_sample(x0, t, eps)
    pred = model(x_t, torch.as_tensor(t), text, conditioning)
    if not torch.isfinite(pred).all():
        raise NumericDivergenceError("model produced non-finite output")
    return torch.mean((eps - pred) ** 2)


def cfg_combine(eps_uncond, eps_cond, w):
    """eps_u + w (eps_c - eps_u); w = 1 returns eps_c itself, avoiding rounding."""
    if w == 1.0:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


@torch.no_grad()
def sample(model, text, conditioning, cfg: SamplerConfig, schedule: NoiseSchedule, shape, dtype=torch.float32):
    """Deterministic DDIM over ``cfg.steps`` evenly strided timesteps.

    ``model(x, t, text, conditioning)`` predicts epsilon; ``text=None`` asks
    for the null caption, which is only evaluated when guidance != 1.
    """
    if cfg.steps < 1:
        raise InvalidArgumentError("sampler needs at least one step")
    taus = schedule.substeps(cfg.steps)
    rng = np.random.default_rng(cfg.seed)
    x = torch.as_tensor(rng.standard_normal(tuple(shape)), dtype=dtype)
    B = shape[0]
    for i, tau in enumerate(taus):
        t = torch.full((B,), int(tau), dtype=torch.int64)
        eps = model(x, t, text, conditioning)
        if cfg.guidance_scale != 1.0:
            eps = cfg_combine(model(x, t, None, conditioning), eps, cfg.guidance_scale)
        ab = float(schedule.alpha_bars[tau])
        ab_prev = float(schedule.alpha_bars[taus[i + 1]]) if i + 1 < len(taus) else 1.0
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if cfg.clip_denoised:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
        if not torch.isfinite(x).all():
            raise NumericDivergenceError("sampler produced non-finite latent", step=i)
    return x
