"""Small torch helpers shared by the model modules."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

torch.use_deterministic_algorithms(True)


class TrainingError(RuntimeError):
    """A training run diverged or missed its quality floor."""


class FrozenError(RuntimeError):
    pass


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def as_batch(x, shape: tuple, what: str) -> tuple[torch.Tensor, bool]:
    """Coerce ``x`` to a float32 batch of ``shape`` items; report if it was single."""
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    if tuple(t.shape) == tuple(shape):
        return t.unsqueeze(0), True
    if t.dim() == len(shape) + 1 and tuple(t.shape[1:]) == tuple(shape):
        return t, False
    raise ValueError(f"{what}: expected shape {tuple(shape)} or (N, *{tuple(shape)}), got {tuple(t.shape)}")


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, v in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    module.frozen = True
    return module


def batches(n: int, batch_size: int, g: torch.Generator | None = None):
    order = torch.randperm(n, generator=g) if g is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
