"""Corpus difficulty checks.

A useful benchmark is separable (a detector that sees OOD labels does well)
without being trivial (a pixel-space nearest-centroid rule does poorly).
"""
from __future__ import annotations

import numpy as np
import torch

from .classifier import predict, train_classifier
from .config import ClassifierConfig
from .evaluation import calibration_fold
from .metrics import auroc


def centroid_auroc(corpus) -> float:
    """AUC of negative pixel MSE to the nearest ID class centroid (train split)."""
    tr = corpus.training_view("train")
    te = corpus.select("test")
    cents = np.stack([tr.images[tr.labels == k].mean(0) for k in np.unique(tr.labels)])
    d = np.stack([((te.images - c) ** 2).mean(axis=(1, 2, 3)) for c in cents], axis=1).min(1)
    return auroc(-d, te.ood)


def skyline_auroc(corpus, epochs: int = 15, seed: int = 0) -> float:
    """AUC of a small CNN trained on ID-vs-OOD labels.

    The test split is halved with the same fold rule used for threshold
    selection: the CNN trains on one half and is scored on the other.
    """
    te = corpus.select("test")
    fit = calibration_fold(te.ids, seed)
    cfg = ClassifierConfig(epochs=epochs, accuracy_floor=0.0, seed=seed)
    model, _ = train_classifier(te.images[fit], te.ood[fit], 2, cfg)
    _, probs = predict(model, torch.as_tensor(te.images[~fit]))
    return auroc(probs[:, 0], te.ood[~fit])
