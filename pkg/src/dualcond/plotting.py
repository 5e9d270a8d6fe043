"""Report figures. Every function writes one PNG and returns its path."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
ID_COLOR, OOD_COLOR = "#1f77b4", "#d62728"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp metadata, so reruns give identical files
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(losses, path, title: str = "training loss", smooth: int = 50) -> Path:
    losses = np.asarray(losses, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(losses, lw=0.6, alpha=0.4, color="0.4", label="step")
        if len(losses) >= smooth:
            k = np.ones(smooth) / smooth
            ax.plot(np.arange(smooth - 1, len(losses)), np.convolve(losses, k, mode="valid"),
                    lw=1.4, color=ID_COLOR, label=f"{smooth}-step mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def score_histogram(scores, truth, path, tau: float | None = None) -> Path:
    s, y = np.asarray(scores, dtype=float), np.asarray(truth)
    lo = min(s.min(), tau if tau is not None else s.min())
    bins = np.linspace(lo, 1.0, 40)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.hist(s[y == 0], bins=bins, alpha=0.6, color=ID_COLOR, label=f"ID (n={int((y == 0).sum())})")
        ax.hist(s[y == 1], bins=bins, alpha=0.6, color=OOD_COLOR, label=f"OOD (n={int((y == 1).sum())})")
        if tau is not None:
            ax.axvline(tau, color="k", ls="--", lw=1, label=f"tau = {tau:.3f}")
        ax.set_xlabel("feature cosine similarity")
        ax.set_ylabel("count")
        ax.legend(frameon=False, loc="upper left")
        return _save(fig, path)


def roc_points(scores, truth):
    """(fpr, tpr) with OOD as positive and low score flagged first."""
    s, y = np.asarray(scores, dtype=float), np.asarray(truth)
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    # one point per distinct threshold
    last = np.r_[np.diff(s) != 0, True]
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]
    tpr = np.r_[0, tp / max(1, (y == 1).sum())]
    fpr = np.r_[0, fp / max(1, (y == 0).sum())]
    return fpr, tpr


def roc_curve(scores, truth, path, auc: float | None = None) -> Path:
    fpr, tpr = roc_points(scores, truth)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        ax.plot(fpr, tpr, color=ID_COLOR, lw=1.5, label=None if auc is None else f"AUC = {auc:.3f}")
        ax.plot([0, 1], [0, 1], color="0.6", ls=":", lw=1)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate (OOD)")
        if auc is not None:
            ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def reconstruction_grid(originals, reconstructions, path, labels=None, scores=None) -> Path:
    """Two rows per block: inputs on top, regenerated images below."""
    x = np.asarray(originals)[:, 0]
    r = np.asarray(reconstructions)[:, 0]
    n = len(x)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.1 * n, 2.5), squeeze=False)
        for i in range(n):
            for row, img in ((0, x[i]), (1, r[i])):
                ax = axes[row, i]
                ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
            title = []
            if labels is not None:
                title.append(str(labels[i]))
            if scores is not None:
                title.append(f"{scores[i]:.2f}")
            axes[0, i].set_title(" ".join(title), fontsize=7)
        axes[0, 0].set_ylabel("input")
        axes[1, 0].set_ylabel("regen.")
        return _save(fig, path)


def ablation_bars(methods, means, stds, path, metric: str = "AUC") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3))
        pos = np.arange(len(methods))
        ax.bar(pos, means, yerr=stds, capsize=3, color=["0.6", "#9ecae1", "#6baed6", ID_COLOR][:len(methods)])
        ax.set_xticks(pos)
        ax.set_xticklabels(methods, rotation=15)
        ax.set_ylabel(metric)
        lo = max(0.0, min(np.asarray(means) - np.asarray(stds)) - 0.05)
        ax.set_ylim(lo, 1.0)
        return _save(fig, path)
