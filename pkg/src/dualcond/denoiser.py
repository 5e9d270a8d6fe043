"""Conditional noise-prediction U-Net over autoencoder latents."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from ._torch import as_batch, freeze
from .conditioning import Conditioner, ConditionEmbedding
from .schedule import build_schedule


def _groups(c: int) -> int:
    # at least two channels per group so 1x1 maps still normalize
    for g in (8, 4, 2):
        if c % g == 0 and c // g >= 2:
            return g
    return 1


def sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, T: int):
        super().__init__()
        self.dim = dim
        self.T = T
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.min() < 1 or t.max() > self.T:
            raise ValueError(f"timestep outside [1, {self.T}]")
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal(t, self.dim).to(dtype))


def time_embedding(module: TimeEmbedding, t: int) -> torch.Tensor:
    """Embedding vector of a single 1-indexed timestep."""
    with torch.no_grad():
        return module(torch.tensor([int(t)]))[0]


class CrossAttention(nn.Module):
    """Spatial queries attend over context tokens; result added residually."""

    def __init__(self, channels: int, context_dim: int, attn_dim: int = 64, heads: int = 1):
        super().__init__()
        if attn_dim % heads:
            raise ValueError("attn_dim must be divisible by heads")
        self.heads = heads
        self.attn_dim = attn_dim
        self.context_dim = context_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(context_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(context_dim, attn_dim, bias=False)
        self.to_out = nn.Linear(attn_dim, channels, bias=False)

    def forward(self, h: torch.Tensor, context: torch.Tensor, return_weights: bool = False):
        """``context`` is (N, context_dim) for one token or (N, L, context_dim)."""
        if context.dim() == 2:
            context = context[:, None, :]
        if context.shape[-1] != self.context_dim:
            raise ValueError(f"context dim {context.shape[-1]} != {self.context_dim}")
        n, c, hh, ww = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)            # (N, HW, C)
        hd = self.attn_dim // self.heads
        q = self.to_q(x).view(n, hh * ww, self.heads, hd).transpose(1, 2)
        k = self.to_k(context).view(n, -1, self.heads, hd).transpose(1, 2)
        v = self.to_v(context).view(n, -1, self.heads, hd).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)   # (N, heads, HW, L)
        out = (w @ v).transpose(1, 2).reshape(n, hh * ww, self.attn_dim)
        out = self.to_out(out).transpose(1, 2).reshape(n, c, hh, ww)
        if return_weights:
            return h + out, w
        return h + out


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Two-level U-Net; every block is a residual block followed by cross-attention."""

    def __init__(self, latent_channels=32, widths=(32, 64), time_dim=64, context_dim=256,
                 attn_dim=64, heads=1, T=1000):
        super().__init__()
        w1, w2 = widths
        self.time = TimeEmbedding(time_dim, T)
        self.inp = nn.Conv2d(latent_channels, w1, 3, padding=1)

        def attn(c):
            return CrossAttention(c, context_dim, attn_dim, heads)

        self.down1, self.attn_d1 = ResBlock(w1, w1, time_dim), attn(w1)
        self.downsample = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.down2, self.attn_d2 = ResBlock(w1, w2, time_dim), attn(w2)
        self.mid, self.attn_mid = ResBlock(w2, w2, time_dim), attn(w2)
        self.up2, self.attn_u2 = ResBlock(w2 + w2, w2, time_dim), attn(w2)
        self.upsample = nn.Conv2d(w2, w2, 3, padding=1)
        self.up1, self.attn_u1 = ResBlock(w2 + w1, w1, time_dim), attn(w1)
        self.out_norm = nn.GroupNorm(_groups(w1), w1)
        self.out = nn.Conv2d(w1, latent_channels, 3, padding=1)

    def attention_blocks(self):
        return [self.attn_d1, self.attn_d2, self.attn_mid, self.attn_u2, self.attn_u1]

    def forward(self, z, t, d0):
        temb = self.time(t)
        h0 = self.inp(z)
        h1 = self.attn_d1(self.down1(h0, temb), d0)
        h2 = self.attn_d2(self.down2(self.downsample(h1), temb), d0)
        h = self.attn_mid(self.mid(h2, temb), d0)
        h = self.attn_u2(self.up2(torch.cat([h, h2], 1), temb), d0)
        h = F.interpolate(h, size=h1.shape[-2:], mode="nearest")
        h = self.upsample(h)
        h = self.attn_u1(self.up1(torch.cat([h, h1], 1), temb), d0)
        return self.out(F.silu(self.out_norm(h)))


class Denoiser(nn.Module):
    """Noise predictor plus the conditioning parameters trained with it.

    ``latent_scale`` multiplies encoder latents before diffusion so that the
    diffused variable has roughly unit variance. The prediction is
    ``sqrt(1 - alpha_bar_t) * z_t + unet(z_t, t, d0)``: the first term is the
    exact noise estimate under a unit Gaussian prior on the clean latent, so
    the network only models the residual. Without it, small shrinkage errors
    at large t compound through the deterministic sampler.
    """

    def __init__(self, latent_shape=(32, 4, 4), n_classes=5, widths=(32, 64), time_dim=64,
                 attn_dim=64, heads=1, cond_dim=128, T=1000, mode="dual", latent_scale=1.0,
                 beta_start=0.0015, beta_end=0.0195):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.arch = {"latent_shape": list(latent_shape), "n_classes": n_classes, "widths": list(widths),
                     "time_dim": time_dim, "attn_dim": attn_dim, "heads": heads, "cond_dim": cond_dim,
                     "T": T, "mode": mode, "beta_start": beta_start, "beta_end": beta_end}
        self.T = T
        sched = build_schedule(T, beta_start, beta_end)
        skip = torch.tensor(np.sqrt(1.0 - sched.alpha_bars), dtype=torch.float32)
        self.register_buffer("skip_coef", torch.cat([torch.zeros(1), skip]), persistent=False)
        self.cond = Conditioner(latent_shape[0], n_classes, cond_dim, mode)
        self.unet = UNet(latent_shape[0], tuple(widths), time_dim, 2 * cond_dim, attn_dim, heads, T)
        self.register_buffer("latent_scale", torch.tensor(float(latent_scale)))
        self.frozen = False

    @property
    def mode(self) -> str:
        return self.cond.mode

    def forward(self, z_t, t, d0):
        skip = self.skip_coef.to(z_t.dtype)[t][:, None, None, None]
        return skip * z_t + self.unet(z_t, t, d0)


def _timesteps(t, n: int, T: int) -> torch.Tensor:
    ts = torch.as_tensor(t, dtype=torch.int64)
    if ts.dim() == 0:
        ts = ts.expand(n)
    if ts.shape != (n,):
        raise ValueError("need one timestep per batch element")
    if ts.min() < 1 or ts.max() > T:
        raise ValueError(f"timestep outside [1, {T}]")
    return ts


def predict_noise(model: Denoiser, z_t, t, d0) -> torch.Tensor:
    """Noise estimate for a latent (or batch of latents) at timestep ``t``."""
    zb, single = as_batch(z_t, model.latent_shape, "predict_noise")
    ctx = d0.d0 if isinstance(d0, ConditionEmbedding) else torch.as_tensor(d0)
    if ctx.dim() == 1:
        ctx = ctx[None]
    if ctx.shape[-1] != 2 * model.cond.dim:
        raise ValueError(f"d0 must have {2 * model.cond.dim} dims")
    if ctx.shape[0] == 1 and len(zb) > 1:
        ctx = ctx.expand(len(zb), -1)
    ts = _timesteps(t, len(zb), model.T)
    with torch.no_grad():
        eps = model(zb, ts, ctx.to(zb.dtype))
    return eps[0] if single else eps


def save_denoiser(model: Denoiser, path, meta: dict | None = None) -> str:
    return checkpoint.save(path, "denoiser", {"arch": model.arch, **(meta or {})},
                           checkpoint.state_to_arrays(model))


def load_denoiser(path):
    meta, arrays, digest = checkpoint.load(path, "denoiser")
    a = meta["arch"]
    model = Denoiser(tuple(a["latent_shape"]), a["n_classes"], tuple(a["widths"]), a["time_dim"],
                     a["attn_dim"], a["heads"], a["cond_dim"], a["T"], a["mode"],
                     beta_start=a["beta_start"], beta_end=a["beta_end"])
    try:
        model.load_state_dict(checkpoint.arrays_to_state(arrays))
    except RuntimeError as exc:
        raise checkpoint.CheckpointError(f"{path}: parameter shapes disagree with metadata") from exc
    return freeze(model), meta, digest
