"""Detection metrics and image-quality scoring.

Score orientation is fixed everywhere in this module: a high score means
ID-like (cosine similarity), and OOD (label 1) is the positive class.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def _binary(truth) -> np.ndarray:
    t = np.asarray(truth)
    if t.size and not np.isin(t, (0, 1)).all():
        raise ValueError("truth labels must be 0 (ID) or 1 (OOD)")
    return t.astype(np.int64)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ascending ranks, ties receive the mean of their rank span."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def auroc(scores, truth) -> float:
    """Probability that a random OOD sample scores below a random ID sample.

    Ties count one half. Computed from the Mann-Whitney rank sum.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(truth)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {y.shape}")
    n_ood = int(y.sum())
    n_id = len(y) - n_ood
    if n_ood == 0 or n_id == 0:
        raise ValueError("auroc needs both ID and OOD samples")
    ranks = _average_ranks(s)
    u_id = ranks[y == 0].sum() - n_id * (n_id + 1) / 2.0
    return float(u_id / (n_id * n_ood))


@dataclass
class ConfusionMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}_undefined")
        return 0.0
    return num / den


def confusion_metrics(y_pred, truth, warn: bool = True) -> ConfusionMetrics:
    p = _binary(y_pred)
    y = _binary(truth)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    flags: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    # from counts rather than 2PR/(P+R): same value, no intermediate rounding
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", flags) if precision + recall > 0 else _ratio(0, 0, "f1", flags)
    accuracy = _ratio(tp + tn, len(y), "accuracy", flags)
    if flags and warn:
        warnings.warn(f"degenerate confusion table: {', '.join(flags)}", RuntimeWarning, stacklevel=2)
    return ConfusionMetrics(accuracy, precision, recall, f1, tp, fp, fn, tn, flags)


def decisions_at(scores, tau: float) -> np.ndarray:
    # 0 (ID) iff score > tau; ties fall to OOD
    return (np.asarray(scores, dtype=np.float64) <= tau).astype(np.int64)


def select_threshold(val_scores, val_truth) -> float:
    """Pick the tau maximizing F1 among midpoints of adjacent sorted scores.

    Ties go to the higher tau.
    """
    s = np.asarray(val_scores, dtype=np.float64)
    y = _binary(val_truth)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {y.shape}")
    if y.min(initial=1) == y.max(initial=0) or len(y) < 2:
        raise ValueError("threshold selection needs both ID and OOD samples")
    u = np.unique(s)
    if len(u) == 1:
        return float(u[0])
    candidates = (u[:-1] + u[1:]) / 2.0
    best_tau, best_f1 = None, -1.0
    for tau in candidates:
        f1 = confusion_metrics(decisions_at(s, tau), y, warn=False).f1
        if f1 >= best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau


def ssim(x, y, win_size: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all valid ``win_size`` windows with a uniform kernel.

    Inputs are [-1, 1] images (H x W or C x H x W); they are mapped to
    [0, 1] and scored with dynamic range 1. Local variances use the sample
    (N - 1) normalization. Channels are averaged.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3 or min(a.shape[1:]) < win_size:
        raise ValueError(f"expected (C, H, W) with H, W >= {win_size}, got {a.shape}")
    a = (a + 1.0) / 2.0
    b = (b + 1.0) / 2.0
    c1 = k1 ** 2
    c2 = k2 ** 2
    n = win_size * win_size
    cov_norm = n / (n - 1.0)

    def local_mean(img):
        w = np.lib.stride_tricks.sliding_window_view(img, (win_size, win_size), axis=(-2, -1))
        return w.mean(axis=(-2, -1))

    ux, uy = local_mean(a), local_mean(b)
    vx = cov_norm * (local_mean(a * a) - ux * ux)
    vy = cov_norm * (local_mean(b * b) - uy * uy)
    vxy = cov_norm * (local_mean(a * b) - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float((num / den).mean())


def mean_ssim(xs, ys) -> float:
    return float(np.mean([ssim(a, b) for a, b in zip(xs, ys)]))
