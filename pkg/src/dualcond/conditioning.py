"""Dual conditioning: latent image features plus a learned class embedding.

The image half (LIFC) is the global average pool of the encoder's latent map
followed by a projection to 128 dims. The class half (IDCC) is a row of a
learned label table. Both are concatenated into the 256-d context ``d0``.
Ablation modes replace a dead half with a learned null vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .autoencoder import check_frozen, encode

MODES = ("dual", "idcc_only", "lifc_only", "unconditional")
HALF_DIM = 128


@dataclass(frozen=True)
class ConditionEmbedding:
    f_img: torch.Tensor
    f_cls: torch.Tensor
    d0: torch.Tensor

    def split(self) -> tuple[torch.Tensor, torch.Tensor]:
        k = self.f_img.shape[-1]
        return self.d0[..., :k], self.d0[..., k:]


def gap(latent: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean of a (C, h, w) or (N, C, h, w) map."""
    return latent.mean(dim=(-2, -1))


def fuse(f_img: torch.Tensor, f_cls: torch.Tensor, dim: int = HALF_DIM) -> ConditionEmbedding:
    f_img = torch.as_tensor(f_img)
    f_cls = torch.as_tensor(f_cls)
    if f_img.shape[-1] != dim or f_cls.shape[-1] != dim:
        raise ValueError(f"both halves must have {dim} dims, got {f_img.shape[-1]} and {f_cls.shape[-1]}")
    if f_img.shape[:-1] != f_cls.shape[:-1]:
        raise ValueError("batch shapes of the two halves differ")
    return ConditionEmbedding(f_img, f_cls, torch.cat([f_img, f_cls], dim=-1))


class Conditioner(nn.Module):
    """Owns the LIFC projection, the label table and the ablation null vectors."""

    def __init__(self, latent_channels: int, n_classes: int, dim: int = HALF_DIM, mode: str = "dual"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.dim = dim
        self.n_classes = n_classes
        self.latent_channels = latent_channels
        self.lifc_proj = nn.Identity() if latent_channels == dim else nn.Linear(latent_channels, dim)
        self.label_table = nn.Embedding(n_classes, dim)
        self.null_img = nn.Parameter(torch.randn(dim) * 0.1)
        self.null_cls = nn.Parameter(torch.randn(dim) * 0.1)

    @property
    def image_live(self) -> bool:
        return self.mode in ("dual", "lifc_only")

    @property
    def class_live(self) -> bool:
        return self.mode in ("dual", "idcc_only")

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.lifc_proj(pooled)

    def embed(self, class_id) -> torch.Tensor:
        ids = torch.as_tensor(class_id, dtype=torch.int64)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.n_classes):
            raise IndexError(f"class id out of range [0, {self.n_classes})")
        return self.label_table(ids)

    def forward(self, pooled: torch.Tensor, class_id) -> ConditionEmbedding:
        """Build ``d0`` for a batch from pooled latents and class ids."""
        n = pooled.shape[0]
        f_img = self.project(pooled) if self.image_live else self.null_img.expand(n, -1)
        f_cls = self.embed(class_id) if self.class_live else self.null_cls.expand(n, -1)
        return fuse(f_img, f_cls, self.dim)


def extract_lifc(ae, conditioner: Conditioner, x0) -> torch.Tensor:
    """128-d image feature of ``x0`` through the frozen encoder."""
    check_frozen(ae)
    with torch.no_grad():
        return conditioner.project(gap(encode(ae, x0)))


def embed_idcc(conditioner: Conditioner, class_id) -> torch.Tensor:
    with torch.no_grad():
        return conditioner.embed(class_id)
