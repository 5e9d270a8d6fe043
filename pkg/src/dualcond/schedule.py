"""Fixed linear variance schedule and the closed-form forward process.

Timesteps are 1-indexed at the API boundary (t in 1..T). Index 0 is reserved
for the clean signal, where the cumulative product is defined as 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if isinstance(t, bool) or int(t) != t or not lo <= int(t) <= self.T:
            raise ValueError(f"timestep {t!r} outside [{lo}, {self.T}]")
        return int(t)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at 1-indexed ``t``; ``alpha_bar(0) == 1``."""
        t = self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_t(t) - 1])

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def params(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.empty(T, dtype=np.float64)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc *= a
        alpha_bars[i] = acc
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(values, dtype=np.float64))
    c = c.to(dtype=like.dtype)
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def forward_diffuse(schedule: NoiseSchedule, z0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Sample ``z_t`` from ``q(z_t | z_0)`` given explicit ``noise``.

    ``t`` is either a python int applied to the whole tensor or a 1-D integer
    tensor with one timestep per leading-dimension element.
    """
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs noise {tuple(noise.shape)}")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        ts = t.cpu().numpy()
        if ts.shape[0] != z0.shape[0]:
            raise ValueError("per-sample timesteps must match the batch size")
        if ts.min() < 1 or ts.max() > schedule.T:
            raise ValueError(f"timesteps outside [1, {schedule.T}]")
        ab = schedule.alpha_bars[ts - 1]
    else:
        ab = schedule.alpha_bar(schedule.check_t(int(t)))
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), z0) * noise
