"""Dual-conditioned latent diffusion for reconstruction-based OOD detection."""
from .schedule import NoiseSchedule, build_schedule, forward_diffuse
from .pipeline import ModelBundle, ScoredSample, decide, ood_score, reconstruct, score_dataset
from .metrics import auroc, confusion_metrics, select_threshold, ssim

__all__ = [
    "NoiseSchedule", "build_schedule", "forward_diffuse",
    "ModelBundle", "ScoredSample", "decide", "ood_score", "reconstruct", "score_dataset",
    "auroc", "confusion_metrics", "select_threshold", "ssim",
]
__version__ = "0.1.0"
