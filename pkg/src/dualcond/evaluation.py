"""Scoring a labelled corpus end to end and summarizing the result."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .metrics import auroc, confusion_metrics, decisions_at, select_threshold
from .pipeline import ModelBundle, RawScore, apply_threshold, score_raw


def calibration_fold(ids, seed: int = 0) -> np.ndarray:
    """Boolean mask of the half of ``ids`` used to pick the threshold.

    Membership depends only on the id and seed, so it is stable under
    reordering and subsetting.
    """
    return np.array([hashlib.sha256(f"fold:{int(seed)}:{i}".encode()).digest()[0] % 2 == 0 for i in ids],
                    dtype=bool)


@dataclass
class EvalResult:
    raw: list[RawScore]
    tau: float
    tau_source: str
    auc: float
    mean_id: float
    mean_ood: float
    metrics: dict                      # threshold metrics on the held-out fold
    extra: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    reconstructions: dict = field(default_factory=dict)

    @property
    def scored(self):
        return apply_threshold(self.raw, self.tau)

    def report(self) -> dict:
        out = {"auc": self.auc, "tau": self.tau, "tau_source": self.tau_source,
               "mean_score_id": self.mean_id, "mean_score_ood": self.mean_ood,
               "n_scored": sum(r.error is None for r in self.raw), "n_failed": len(self.failures)}
        for k, v in self.metrics.items():
            out[k] = v
        out.update(self.extra)
        return out


def _threshold_metrics(scores, truth, tau, prefix=""):
    m = confusion_metrics(decisions_at(scores, tau), truth, warn=False)
    d = {f"{prefix}{k}": v for k, v in m.as_dict().items() if k != "flags"}
    if m.flags:
        d[f"{prefix}flags"] = ",".join(m.flags)
    return d


def evaluate(bundle: ModelBundle, corpus, seed: int = 0, tau: float | None = None,
             batch_size: int = 400, keep_reconstructions: bool = False) -> EvalResult:
    """Score the test split of ``corpus`` and compute the report metrics.

    A threshold is always selected for F1 on a calibration half of the test
    split (the validation split carries no OOD samples) and its metrics are
    reported on the other half under ``selected_``. Without ``tau`` those are
    also the headline metrics; with ``tau`` the headline metrics apply it to
    the whole split. AUC always covers the whole split.
    """
    test = corpus.select("test")
    if len(test) == 0:
        raise ValueError("corpus has no test split")
    if len(set(test.ood.tolist())) < 2:
        raise ValueError("test split needs both ID and OOD samples")
    res = score_raw(bundle, test.ids, test.images, test.ood, seed, batch_size, keep_reconstructions)
    raw, recon = res if keep_reconstructions else (res, {})
    ok = np.array([r.error is None for r in raw])
    failures = {r.sample_id: r.error for r in raw if r.error is not None}
    s = np.array([r.ood_score for r in raw])[ok]
    y = test.ood[ok]
    ids = test.ids[ok]
    cal = calibration_fold(ids, seed)
    if len(set(y[cal].tolist())) < 2 or len(set(y[~cal].tolist())) < 2:
        cal = np.ones(len(y), dtype=bool)  # too small to split; fit and report on the same samples
    tau_sel = select_threshold(s[cal], y[cal])
    held = ~cal if (~cal).any() else cal
    selected = _threshold_metrics(s[held], y[held], tau_sel)
    extra = {"tau_selected": tau_sel, **{f"selected_{k}": v for k, v in selected.items()}}
    if tau is None:
        metrics, used, source = selected, tau_sel, "calibration_fold"
    else:
        metrics, used, source = _threshold_metrics(s, y, tau), float(tau), "flag"
    return EvalResult(raw, used, source, auroc(s, y), float(s[y == 0].mean()), float(s[y == 1].mean()),
                      metrics, extra, failures, recon)
