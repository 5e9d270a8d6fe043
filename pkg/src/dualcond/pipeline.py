"""End-to-end OOD scoring: classify, condition, regenerate, compare features."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import classifier as cfr
from .autoencoder import Autoencoder, check_frozen, decode, encode
from .conditioning import gap
from .denoiser import Denoiser
from .sampler import initial_noise, sample_latents
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)

REFERENCE_TAU = 0.73


@dataclass
class ModelBundle:
    ae: Autoencoder
    denoiser: Denoiser
    schedule: NoiseSchedule
    classifier: cfr.Classifier
    steps: int = 100
    noise_to_t: int = 0
    hashes: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in (self.ae, self.denoiser, self.classifier):
            check_frozen(m)
        if tuple(self.ae.latent_shape) != tuple(self.denoiser.latent_shape):
            raise ValueError(f"autoencoder latent {self.ae.latent_shape} does not match "
                             f"denoiser latent {self.denoiser.latent_shape}")
        if tuple(self.ae.image_shape) != tuple(self.classifier.image_shape):
            raise ValueError("autoencoder and classifier disagree on image shape")
        if self.denoiser.cond.n_classes != self.classifier.n_classes:
            raise ValueError("label table and classifier disagree on the number of classes")
        if self.denoiser.T != self.schedule.T:
            raise ValueError("denoiser and schedule disagree on T")
        if not 1 <= self.steps <= (self.noise_to_t or self.schedule.T):
            raise ValueError("sampler steps exceed the starting timestep")


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    truth: int | None
    predicted_class: int
    ood_score: float
    y_pred: int


def sample_seed(run_seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{int(run_seed)}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def reconstruct_batch(bundle: ModelBundle, images, seeds) -> tuple[torch.Tensor, np.ndarray]:
    """Regenerate each image from seeded noise under its own dual context."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    pred, _ = cfr.predict(bundle.classifier, x)
    pred = np.atleast_1d(pred)
    z0 = encode(bundle.ae, x)
    den = bundle.denoiser
    with torch.no_grad():
        ctx = den.cond(gap(z0), torch.as_tensor(pred)).d0
    noise = initial_noise(seeds, den.latent_shape)
    if bundle.noise_to_t:
        start = bundle.noise_to_t
        z_start = forward_diffuse(bundle.schedule, z0 * den.latent_scale, start, noise)
    else:
        start, z_start = bundle.schedule.T, noise
    z = sample_latents(den, bundle.schedule, ctx, z_start, bundle.steps, start)
    return decode(bundle.ae, z / den.latent_scale), pred


def reconstruct(bundle: ModelBundle, x0, seed: int) -> tuple[torch.Tensor, int]:
    x = torch.as_tensor(np.asarray(x0), dtype=torch.float32)
    if tuple(x.shape) != bundle.ae.image_shape:
        raise ValueError(f"expected image of shape {bundle.ae.image_shape}, got {tuple(x.shape)}")
    out, pred = reconstruct_batch(bundle, x[None], [seed])
    return out[0], int(pred[0])


def ood_score(f0, f0_prime) -> float:
    """Cosine similarity of two feature vectors; high means ID-like."""
    a = np.asarray(f0, dtype=np.float64)
    b = np.asarray(f0_prime, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"feature shapes differ or are not vectors: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def decide(score: float, tau: float) -> int:
    """0 (ID) if the score is strictly above tau, otherwise 1 (OOD)."""
    if not -1.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [-1, 1]")
    if not -1.0 <= tau <= 1.0:
        raise ValueError(f"tau {tau} outside [-1, 1]")
    return 0 if score > tau else 1


@dataclass
class RawScore:
    sample_id: str
    truth: int | None
    predicted_class: int
    ood_score: float
    error: str | None = None


def score_raw(bundle: ModelBundle, ids, images, truth=None, seed: int = 0,
              batch_size: int = 400, keep_reconstructions: bool = False):
    """Score every sample; returns RawScores in input order.

    Samples are processed in batches ordered by sample id, with per-sample
    noise seeds derived from ``seed`` and the id, so results do not depend on
    the order of the input.
    """
    ids = [str(i) for i in ids]
    images = np.asarray(images)
    truth = [None] * len(ids) if truth is None else [int(v) for v in truth]
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    out: dict[int, RawScore] = {}
    recon: dict[int, np.ndarray] = {}
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        try:
            results = _score_chunk(bundle, [ids[i] for i in chunk], images[chunk], seed)
        except (ValueError, FloatingPointError) as exc:
            log.warning("batch failed (%s); retrying samples one by one", exc)
            results = []
            for i in chunk:
                try:
                    results.extend(_score_chunk(bundle, [ids[i]], images[[i]], seed))
                except (ValueError, FloatingPointError) as err:
                    results.append((-1, float("nan"), None, str(err)))
        for i, (pred, score, rec, err) in zip(chunk, results):
            out[i] = RawScore(ids[i], truth[i], pred, score, err)
            if keep_reconstructions and rec is not None:
                recon[i] = rec
    scores = [out[i] for i in range(len(ids))]
    if keep_reconstructions:
        return scores, recon
    return scores


def _score_chunk(bundle, ids, images, seed):
    seeds = [sample_seed(seed, s) for s in ids]
    x = torch.as_tensor(images, dtype=torch.float32)
    x_rec, pred = reconstruct_batch(bundle, x, seeds)
    f0 = cfr.features(bundle.classifier, x)
    f1 = cfr.features(bundle.classifier, x_rec)
    rows = []
    for k in range(len(ids)):
        try:
            rows.append((int(pred[k]), ood_score(f0[k], f1[k]), x_rec[k].numpy(), None))
        except ValueError as err:
            rows.append((int(pred[k]), float("nan"), x_rec[k].numpy(), str(err)))
    return rows


def apply_threshold(raw: list[RawScore], tau: float) -> list[ScoredSample]:
    """Attach decisions; samples that failed to score are left out."""
    return [ScoredSample(r.sample_id, r.truth, r.predicted_class, r.ood_score, decide(r.ood_score, tau))
            for r in raw if r.error is None]


def score_dataset(bundle: ModelBundle, corpus, tau: float, seed: int = 0, batch_size: int = 400):
    """Score a corpus and decide ID/OOD at ``tau``.

    Returns ``(scored, failures)`` where ``failures`` maps sample id to the
    error message of samples that could not be scored.
    """
    if len(corpus) == 0:
        return [], {}
    raw = score_raw(bundle, corpus.ids, corpus.images, corpus.ood, seed, batch_size)
    failures = {r.sample_id: r.error for r in raw if r.error is not None}
    return apply_threshold(raw, tau), failures
