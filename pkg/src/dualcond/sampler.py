"""Reverse diffusion: deterministic DDIM (eta = 0) and the ancestral step."""
from __future__ import annotations

import numpy as np
import torch

from ._torch import generator
from .autoencoder import decode
from .conditioning import ConditionEmbedding
from .denoiser import Denoiser
from .schedule import NoiseSchedule


def _scalar(v: float, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(v, dtype=like.dtype)


def predict_x0(schedule: NoiseSchedule, z_t: torch.Tensor, eps_hat: torch.Tensor, t: int) -> torch.Tensor:
    ab = schedule.alpha_bar(t)
    return (z_t - _scalar(np.sqrt(1.0 - ab), z_t) * eps_hat) / _scalar(np.sqrt(ab), z_t)


def ddim_step(schedule: NoiseSchedule, z_t, eps_hat, t: int, t_prev: int) -> torch.Tensor:
    """Move from ``t`` to ``t_prev`` (0 means the clean latent)."""
    z_t = torch.as_tensor(z_t)
    eps_hat = torch.as_tensor(eps_hat, dtype=z_t.dtype)
    t = schedule.check_t(t)
    t_prev = schedule.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError(f"DDIM needs t > t_prev, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(schedule, z_t, eps_hat, t)
    ab_prev = schedule.alpha_bar(t_prev)
    return _scalar(np.sqrt(ab_prev), z_t) * x0 + _scalar(np.sqrt(1.0 - ab_prev), z_t) * eps_hat


def posterior_variance(schedule: NoiseSchedule, t: int) -> float:
    t = schedule.check_t(t)
    return (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t)) * schedule.beta(t)


def ddpm_step(schedule: NoiseSchedule, z_t, eps_hat, t: int, noise=None) -> torch.Tensor:
    """One ancestral step with the posterior variance beta-tilde."""
    z_t = torch.as_tensor(z_t)
    eps_hat = torch.as_tensor(eps_hat, dtype=z_t.dtype)
    t = schedule.check_t(t)
    a, ab = schedule.alpha(t), schedule.alpha_bar(t)
    mean = (z_t - _scalar((1.0 - a) / np.sqrt(1.0 - ab), z_t) * eps_hat) / _scalar(np.sqrt(a), z_t)
    if noise is None:
        return mean
    noise = torch.as_tensor(noise, dtype=z_t.dtype)
    if noise.shape != z_t.shape:
        raise ValueError("noise must match z_t in shape")
    return mean + _scalar(np.sqrt(posterior_variance(schedule, t)), z_t) * noise


def ddim_ladder(T: int, steps: int, start: int | None = None) -> list[int]:
    """Evenly spaced descending timesteps from ``start`` (default T), ending at 0."""
    start = T if start is None else start
    if steps < 1 or steps > start:
        raise ValueError(f"steps must lie in [1, {start}], got {steps}")
    ladder = [int(round(start * (steps - i) / steps)) for i in range(steps)]
    return ladder + [0]


def sample_latents(model: Denoiser, schedule: NoiseSchedule, d0: torch.Tensor, z_start: torch.Tensor,
                   steps: int, start: int | None = None, check_finite: bool = True) -> torch.Tensor:
    """Run DDIM from ``z_start`` at timestep ``start`` down to a clean latent."""
    ladder = ddim_ladder(schedule.T, steps, start)
    z = z_start
    n = len(z)
    with torch.no_grad():
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            eps = model(z, torch.full((n,), t, dtype=torch.int64), d0)
            z = ddim_step(schedule, z, eps, t, t_prev)
            if check_finite and not torch.isfinite(z).all():
                raise FloatingPointError(f"non-finite latent at step t={t_prev}")
    return z


def initial_noise(seeds, shape) -> torch.Tensor:
    """One standard-normal latent per seed, independent of batch composition."""
    return torch.stack([torch.randn(tuple(shape), generator=generator(s)) for s in seeds])


def sample(model: Denoiser, ae, schedule: NoiseSchedule, d0, steps: int, seed) -> torch.Tensor:
    """Generate image(s) from seeded pure noise under context ``d0``.

    ``seed`` is an int for a single image or a sequence with one seed per row
    of a batched ``d0``.
    """
    if steps < 1 or steps > schedule.T:
        raise ValueError(f"steps must lie in [1, {schedule.T}]")
    ctx = d0.d0 if isinstance(d0, ConditionEmbedding) else torch.as_tensor(d0)
    single = ctx.dim() == 1
    if single:
        ctx = ctx[None]
    seeds = [seed] if single else list(seed)
    if len(seeds) != len(ctx):
        raise ValueError("need one seed per context row")
    z = initial_noise(seeds, model.latent_shape)
    z0 = sample_latents(model, schedule, ctx.to(z.dtype), z, steps)
    images = decode(ae, z0 / model.latent_scale)
    return images[0] if single else images
