"""Training of the conditional denoiser with the epsilon-prediction loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from ._torch import TrainingError, batches, freeze, generator
from .autoencoder import check_frozen, encode_batched
from .conditioning import MODES, gap
from .config import DiffusionConfig
from .denoiser import Denoiser
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


@dataclass
class LossRecord:
    step: int
    loss: float


@dataclass
class LatentSet:
    """Encoder outputs for a training set, computed once with the frozen AE."""
    z0: torch.Tensor       # (N, C, h, w), unscaled
    pooled: torch.Tensor   # (N, C)
    labels: torch.Tensor   # (N,)


@dataclass
class TrainResult:
    model: Denoiser
    losses: list[LossRecord] = field(default_factory=list)

    def loss_array(self) -> np.ndarray:
        return np.array([r.loss for r in self.losses])


def encode_training_set(ae, images, labels) -> LatentSet:
    check_frozen(ae)
    z0 = encode_batched(ae, images)
    return LatentSet(z0, gap(z0), torch.as_tensor(np.asarray(labels), dtype=torch.int64))


def diffusion_loss(model: Denoiser, schedule: NoiseSchedule, z0_scaled, pooled, labels, t, noise):
    """Mean squared error between injected and predicted noise for one batch."""
    z_t = forward_diffuse(schedule, z0_scaled, t, noise)
    ctx = model.cond(pooled, labels)
    eps = model(z_t, t, ctx.d0)
    return F.mse_loss(eps, noise)


def training_step(model: Denoiser, opt, schedule: NoiseSchedule, data: LatentSet, idx,
                  g: torch.Generator, step: int = 0) -> LossRecord:
    """Draw timesteps and noise for ``idx``, take one optimizer step."""
    z0 = data.z0[idx] * model.latent_scale
    t = torch.randint(1, schedule.T + 1, (len(idx),), generator=g)
    noise = torch.randn(z0.shape, generator=g)
    loss = diffusion_loss(model, schedule, z0, data.pooled[idx], data.labels[idx], t, noise)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite diffusion loss at step {step}, generator seed {g.initial_seed()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return LossRecord(step, float(loss.item()))


def build_denoiser(cfg: DiffusionConfig, latent_shape, n_classes: int, schedule: NoiseSchedule, mode: str,
                   latent_scale: float, seed: int) -> Denoiser:
    torch.manual_seed(seed)
    p = schedule.params()
    return Denoiser(tuple(latent_shape), n_classes, cfg.widths, cfg.time_dim, cfg.attn_dim, cfg.heads,
                    cfg.cond_dim, p["T"], mode, latent_scale, p["beta_start"], p["beta_end"])


def train_dcdm(data: LatentSet, schedule: NoiseSchedule, config: DiffusionConfig | None = None,
               mode: str = "dual", n_classes: int = 5, seed: int | None = None,
               check_convergence: bool | None = None) -> TrainResult:
    """Train a denoiser in one of the four conditioning modes.

    Modes differ only in which halves of the context are live; schedule,
    architecture and optimizer settings are shared.
    """
    cfg = config or DiffusionConfig()
    seed = cfg.seed if seed is None else seed
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(data.z0) == 0:
        raise ValueError("empty training set")
    scale = float(1.0 / data.z0.std())
    model = build_denoiser(cfg, data.z0.shape[1:], n_classes, schedule, mode, scale, seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = generator(seed)
    records: list[LossRecord] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        for idx in batches(len(data.z0), cfg.batch_size, g):
            rec = training_step(model, opt, schedule, data, idx, g, step)
            if step % cfg.log_every == 0:
                records.append(rec)
            step += 1
        log.info("dcdm[%s] epoch %d loss %.4f", mode, epoch, records[-1].loss)
    freeze(model)
    result = TrainResult(model, records)
    if cfg.require_convergence if check_convergence is None else check_convergence:
        check_converged(result.loss_array())
    return result


def check_converged(losses: np.ndarray, window: int = 100) -> None:
    if not np.isfinite(losses).all():
        raise TrainingError("diffusion loss went non-finite")
    window = min(window, max(1, len(losses) // 2))
    first, last = losses[:window].mean(), losses[-window:].mean()
    if not last < 0.5 * first:
        raise TrainingError(f"diffusion training did not converge: final mean {last:.4f} vs initial {first:.4f}")
