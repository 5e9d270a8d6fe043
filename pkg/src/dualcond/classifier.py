"""In-distribution CNN classifier.

Supplies predicted labels for inference-time class conditioning and the
penultimate features that the OOD score compares.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from ._torch import TrainingError, as_batch, batches, freeze, generator
from .config import ClassifierConfig

log = logging.getLogger(__name__)


class Classifier(nn.Module):
    def __init__(self, n_classes: int, image_shape=(1, 32, 32), widths=(32, 64, 128), feature_dim: int = 128):
        super().__init__()
        self.n_classes = n_classes
        self.image_shape = tuple(image_shape)
        self.widths = tuple(widths)
        self.feature_dim = feature_dim
        layers = []
        cin = image_shape[0]
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(cin, w, 3, padding=1), nn.GroupNorm(8, w), nn.ReLU()]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            cin = w
        self.convs = nn.Sequential(*layers)
        self.feature_head = nn.Linear(widths[-1], feature_dim)
        self.head = nn.Linear(feature_dim, n_classes)
        self.frozen = False

    def features(self, x):
        h = self.convs(x).mean(dim=(2, 3))
        return F.relu(self.feature_head(h))

    def forward(self, x):
        return self.head(self.features(x))

    def config(self) -> dict:
        return {"n_classes": self.n_classes, "image_shape": list(self.image_shape),
                "widths": list(self.widths), "feature_dim": self.feature_dim}


def _blur(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-sample separable 3x3 Gaussian blur; sigma 0 leaves the image as is."""
    k = torch.exp(-torch.tensor([1.0, 0.0, 1.0])[None] / (2 * sigma[:, None].clamp_min(1e-3) ** 2))
    k = k / k.sum(1, keepdim=True)                                   # (N, 3)
    kernel = (k[:, :, None] * k[:, None, :])[:, None]                # (N, 1, 3, 3)
    n, c, h, w = x.shape
    xp = F.pad(x.reshape(1, n * c, h, w), (1, 1, 1, 1), mode="replicate")
    return F.conv2d(xp, kernel.repeat_interleave(c, 0), groups=n * c).reshape(n, c, h, w)


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Random flips, shifts of up to 2 pixels, and mild blur or noise.

    The blur/noise part keeps the features stable on decoder outputs, which
    lack the fine grain of the originals.
    """
    n = len(x)
    x = _blur(x, torch.rand(n, generator=g) * 1.2)
    x = (x + 0.05 * torch.rand(n, 1, 1, 1, generator=g) * torch.randn(x.shape, generator=g)).clamp(-1, 1)
    flip_h = torch.rand(n, generator=g) < 0.5
    flip_v = torch.rand(n, generator=g) < 0.5
    x = torch.where(flip_h[:, None, None, None], x.flip(3), x)
    x = torch.where(flip_v[:, None, None, None], x.flip(2), x)
    shifts = torch.randint(-2, 3, (n, 2), generator=g)
    padded = F.pad(x, (2, 2, 2, 2), value=-1.0)
    h, w = x.shape[2:]
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = int(shifts[i, 0]) + 2, int(shifts[i, 1]) + 2
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def accuracy(model: Classifier, images, labels, batch_size: int = 512) -> float:
    pred = predict(model, images, batch_size=batch_size)[0]
    return float((pred == np.asarray(labels)).mean())


def train_classifier(images, labels, n_classes: int, config: ClassifierConfig | None = None,
                     seed: int | None = None, val_images=None, val_labels=None):
    """Cross-entropy training with light augmentation, then freeze.

    Returns ``(model, history)``. Raises ``ValueError`` when the labels do not
    cover every class and ``TrainingError`` when the held-out accuracy floor is
    missed.
    """
    cfg = config or ClassifierConfig()
    seed = cfg.seed if seed is None else seed
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    present = set(y.tolist())
    if present != set(range(n_classes)):
        raise ValueError(f"labels must cover all {n_classes} classes, found {sorted(present)}")
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    torch.manual_seed(seed)
    model = Classifier(n_classes, tuple(x.shape[1:]), cfg.widths, cfg.feature_dim)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = generator(seed)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        model.train()
        total = 0.0
        for idx in batches(len(x), cfg.batch_size, g):
            loss = F.cross_entropy(model(_augment(x[idx], g)), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"classifier loss non-finite at epoch {epoch}, seed {seed}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        epoch_losses.append(total / len(x))
        log.info("cfr epoch %d loss %.4f", epoch, epoch_losses[-1])
    freeze(model)
    if val_images is None:
        val_images, val_labels = x, y
    acc = accuracy(model, val_images, val_labels)
    history = {"epoch_loss": epoch_losses, "val_accuracy": acc}
    if acc < cfg.accuracy_floor:
        raise TrainingError(f"classifier held-out accuracy {acc:.4f} below floor {cfg.accuracy_floor}")
    return model, history


def _run(model: Classifier, x, fn, batch_size):
    xb, single = as_batch(x, model.image_shape, "classifier")
    if model.training:
        raise RuntimeError("classifier inference requires eval mode")
    with torch.no_grad():
        out = torch.cat([fn(xb[i:i + batch_size]) for i in range(0, len(xb), batch_size)])
    return out, single


def features(model: Classifier, x, batch_size: int = 512) -> np.ndarray:
    """Penultimate activations, shape (feature_dim,) or (N, feature_dim)."""
    out, single = _run(model, x, model.features, batch_size)
    out = out.numpy()
    return out[0] if single else out


def predict(model: Classifier, x, batch_size: int = 512):
    """Return ``(class_ids, probabilities)``; a single image gives an int id."""
    logits, single = _run(model, x, model, batch_size)
    probs = torch.softmax(logits.double(), dim=1).numpy()
    ids = logits.argmax(dim=1).numpy()
    if single:
        return int(ids[0]), probs[0]
    return ids, probs


def save_classifier(model: Classifier, path, meta: dict | None = None) -> str:
    return checkpoint.save(path, "classifier", {"arch": model.config(), **(meta or {})},
                           checkpoint.state_to_arrays(model))


def load_classifier(path):
    meta, arrays, digest = checkpoint.load(path, "classifier")
    a = meta["arch"]
    model = Classifier(a["n_classes"], tuple(a["image_shape"]), tuple(a["widths"]), a["feature_dim"])
    try:
        model.load_state_dict(checkpoint.arrays_to_state(arrays))
    except RuntimeError as exc:
        raise checkpoint.CheckpointError(f"{path}: parameter shapes disagree with metadata") from exc
    return freeze(model), meta, digest
