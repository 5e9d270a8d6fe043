"""Convolutional autoencoder that defines the latent space for diffusion.

Three stride-2 blocks take a 1x32x32 image to a 32x4x4 latent; the decoder
mirrors them and ends in tanh so reconstructions stay in [-1, 1].
"""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from ._torch import FrozenError, TrainingError, as_batch, batches, freeze, generator
from .config import AutoencoderConfig
from .metrics import mean_ssim

log = logging.getLogger(__name__)


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU(),
    )


def _up(cin, cout):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU(),
    )


class Autoencoder(nn.Module):
    def __init__(self, image_shape=(1, 32, 32), widths=(16, 32, 32)):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.widths = tuple(widths)
        factor = 2 ** len(widths)
        if h % factor or w % factor:
            raise ValueError(f"image size must be divisible by {factor}")
        self.latent_shape = (widths[-1], h // factor, w // factor)
        chans = (c,) + self.widths
        self.encoder = nn.Sequential(
            *[_down(chans[i], chans[i + 1]) for i in range(len(widths))],
            nn.Conv2d(widths[-1], widths[-1], 1),
        )
        rev = self.widths[::-1]
        self.decoder = nn.Sequential(
            nn.Conv2d(rev[0], rev[0], 3, padding=1), nn.SiLU(),
            *[_up(rev[i], rev[i + 1] if i + 1 < len(rev) else rev[-1]) for i in range(len(rev))],
            nn.Conv2d(rev[-1], c, 3, padding=1),
        )
        self.frozen = False

    def forward(self, x):
        return torch.tanh(self.decoder(self.encoder(x)))

    def config(self) -> dict:
        return {"image_shape": list(self.image_shape), "widths": list(self.widths)}


def _apply(net, part, x, shape, what):
    xb, single = as_batch(x, shape, what)
    with torch.no_grad():
        out = part(xb)
    return out[0] if single else out


def encode(ae: Autoencoder, x) -> torch.Tensor:
    return _apply(ae, ae.encoder, x, ae.image_shape, "encode")


def decode(ae: Autoencoder, z) -> torch.Tensor:
    return _apply(ae, lambda t: torch.tanh(ae.decoder(t)), z, ae.latent_shape, "decode")


def encode_batched(ae: Autoencoder, images, batch_size: int = 512) -> torch.Tensor:
    x = torch.as_tensor(images, dtype=torch.float32)
    return torch.cat([encode(ae, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def reconstruct_batched(ae: Autoencoder, images, batch_size: int = 512) -> np.ndarray:
    x = torch.as_tensor(images, dtype=torch.float32)
    out = [decode(ae, encode(ae, x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


def train_autoencoder(train_images, config: AutoencoderConfig | None = None, seed: int | None = None,
                      val_images=None, image_shape=None):
    """Fit the autoencoder with pixel MSE and freeze it.

    Returns ``(model, history)`` where ``history`` holds per-step losses,
    per-epoch mean losses and the held-out SSIM. Raises ``TrainingError`` if
    the loss goes non-finite or the held-out SSIM misses the floor.
    """
    cfg = config or AutoencoderConfig()
    seed = cfg.seed if seed is None else seed
    x = torch.as_tensor(np.asarray(train_images), dtype=torch.float32)
    if len(x) == 0:
        raise ValueError("autoencoder training set is empty")
    shape = tuple(image_shape or x.shape[1:])
    torch.manual_seed(seed)
    model = Autoencoder(shape, cfg.widths)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = generator(seed)
    steps, epoch_losses = [], []
    for epoch in range(cfg.epochs):
        model.train()
        total, count = 0.0, 0
        for idx in batches(len(x), cfg.batch_size, g):
            xb = x[idx]
            loss = F.mse_loss(model(xb), xb)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder loss non-finite at epoch {epoch}, seed {seed}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps.append(loss.item())
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
        log.info("ae epoch %d loss %.5f", epoch, epoch_losses[-1])
    freeze(model)
    held = x if val_images is None else torch.as_tensor(np.asarray(val_images), dtype=torch.float32)
    score = mean_ssim(held.numpy(), reconstruct_batched(model, held))
    history = {"step_loss": steps, "epoch_loss": epoch_losses, "val_ssim": score}
    if score < cfg.ssim_floor:
        raise TrainingError(
            f"autoencoder held-out SSIM {score:.4f} below floor {cfg.ssim_floor} after {cfg.epochs} epochs"
        )
    return model, history


def save_autoencoder(ae: Autoencoder, path, meta: dict | None = None) -> str:
    return checkpoint.save(path, "autoencoder", {"arch": ae.config(), **(meta or {})},
                           checkpoint.state_to_arrays(ae))


def load_autoencoder(path) -> tuple[Autoencoder, dict, str]:
    meta, arrays, digest = checkpoint.load(path, "autoencoder")
    arch = meta["arch"]
    ae = Autoencoder(tuple(arch["image_shape"]), tuple(arch["widths"]))
    try:
        ae.load_state_dict(checkpoint.arrays_to_state(arrays))
    except RuntimeError as exc:
        raise checkpoint.CheckpointError(f"{path}: parameter shapes disagree with metadata") from exc
    return freeze(ae), meta, digest


def check_frozen(module) -> None:
    if not getattr(module, "frozen", False):
        raise FrozenError(f"{type(module).__name__} must be frozen before use here")
