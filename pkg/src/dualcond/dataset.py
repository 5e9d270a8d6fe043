"""Synthetic desk-scale corpus and manifest ingestion.

The toy corpus mimics the two difficulty axes of the detection problem:
five ID layouts that vary strongly in pose, scale and deformation, and three
OOD layouts built from the same primitives (filled blobs and rings) in a
different arrangement. Images are single-channel, stored as 8-bit levels and
exposed as float32 in [-1, 1].
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DataConfig

ID_CLASSES = ("quad", "triad", "tract", "ring_blob", "arc")
OOD_CLASSES = ("row_ring", "ring_dots", "arc_ring")
SPLITS = ("train", "val", "test")
_SPLIT_CODE = {s: i for i, s in enumerate(SPLITS)}


class ManifestError(ValueError):
    pass


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(levels: np.ndarray) -> np.ndarray:
    return (levels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


@dataclass
class Corpus:
    ids: np.ndarray      # str, unique
    images: np.ndarray   # (N, 1, H, W) float32 in [-1, 1]
    labels: np.ndarray   # int64, ID 0..4, OOD 5..7
    splits: np.ndarray   # str in SPLITS
    ood: np.ndarray      # int64, 0 = ID, 1 = OOD
    seed: int | None = None

    def __len__(self):
        return len(self.ids)

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.images) == len(self.labels) == len(self.splits) == len(self.ood) == n):
            raise ValueError("corpus columns differ in length")
        if len(set(self.ids.tolist())) != n:
            raise ValueError("sample ids must be unique")

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for i in np.argsort(self.ids, kind="stable"):
            h.update(f"{self.ids[i]}|{int(self.labels[i])}|{self.splits[i]}|{int(self.ood[i])}|".encode())
            h.update(to_uint8(self.images[i]).tobytes())
        return h.hexdigest()

    def select(self, split: str | None = None, ood: int | None = None) -> "Corpus":
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.splits == split
        if ood is not None:
            keep &= self.ood == ood
        return Corpus(self.ids[keep], self.images[keep], self.labels[keep],
                      self.splits[keep], self.ood[keep], self.seed)

    def training_view(self, split: str = "train") -> "Corpus":
        """ID-only view handed to trainers; refuses to leak OOD samples."""
        view = self.select(split=split, ood=0)
        audit_training_view(view)
        return view


def audit_training_view(view: Corpus) -> None:
    if view.ood.any():
        raise ValueError("training view contains OOD samples")
    if (view.labels >= len(ID_CLASSES)).any():
        raise ValueError("training view contains non-ID labels")


# ---------------------------------------------------------------- rendering

def _grid(size: int):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="xy")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Canvas:
    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.X, self.Y = _grid(size)
        self.img = np.zeros((size, size))
        self.soft = 1.6 / size
        # global pose shared by every primitive of the layout
        self.rot = rng.uniform(-math.pi, math.pi)
        self.scale = rng.uniform(0.8, 1.12)
        self.shift = rng.uniform(-0.15, 0.15, size=2)

    def _place(self, cx, cy):
        j = self.rng.normal(0.0, 0.035, size=2)
        x, y = (cx + j[0]) * self.scale, (cy + j[1]) * self.scale
        c, s = math.cos(self.rot), math.sin(self.rot)
        return c * x - s * y + self.shift[0], s * x + c * y + self.shift[1]

    def _radius(self, cx, cy, a, b, angle):
        px, py = self._place(cx, cy)
        d = self.rng.uniform(0.85, 1.15, size=2)  # per-primitive deformation
        a, b = a * d[0] * self.scale, b * d[1] * self.scale
        th = angle + self.rot + self.rng.normal(0.0, 0.12)
        c, s = math.cos(th), math.sin(th)
        dx, dy = self.X - px, self.Y - py
        u = (c * dx + s * dy) / a
        v = (-s * dx + c * dy) / b
        return np.sqrt(u * u + v * v), min(a, b)

    def blob(self, cx, cy, a, b, angle=0.0, level=1.0):
        r, m = self._radius(cx, cy, a, b, angle)
        self.img += level * _sigmoid((1.0 - r) * m / self.soft)

    def ring(self, cx, cy, a, b, angle=0.0, width=0.09, level=1.0):
        r, m = self._radius(cx, cy, a, b, angle)
        self.img += level * _sigmoid((width / 2 - np.abs(r - 1.0) * m) / self.soft)

    def finish(self) -> np.ndarray:
        img = np.clip(0.08 + self.img, 0.0, 1.0)
        n = self.rng.normal(0.0, 1.0, size=(self.size + 1, self.size + 1))
        grain = (n[:-1, :-1] + n[1:, :-1] + n[:-1, 1:] + n[1:, 1:]) / 2.0
        img = np.clip(img * (1.0 + 0.12 * grain), 0.0, 1.0)
        return img * 2.0 - 1.0


def _draw(label: int, cv: _Canvas) -> None:
    if label == 0:    # tissue block with four chambers
        cv.blob(0, 0, 0.72, 0.62, level=0.75)
        for sx, sy in ((-1, -1), (1, -1), (-1, 1), (1, 1)):
            cv.blob(0.27 * sx, 0.24 * sy, 0.19, 0.16, level=-0.6)
    elif label == 1:  # three vessels in a row
        cv.blob(-0.45, 0.12, 0.2, 0.2, level=0.85)
        cv.blob(0.0, 0.0, 0.24, 0.24, level=0.85)
        cv.blob(0.42, -0.12, 0.15, 0.15, level=0.85)
    elif label == 2:  # elongated chamber feeding a small ring
        cv.blob(-0.15, 0.0, 0.55, 0.5, level=0.7)
        cv.blob(-0.15, 0.0, 0.36, 0.12, angle=0.5, level=-0.55)
        cv.ring(0.5, 0.35, 0.2, 0.2, width=0.08, level=0.9)
    elif label == 3:  # large ring with an off-centre blob
        cv.ring(0, 0, 0.68, 0.6, width=0.1, level=0.85)
        cv.blob(0.25, -0.2, 0.22, 0.18, level=0.8)
    elif label == 4:  # arc of five small blobs
        for k in range(5):
            ang = math.pi * (0.1 + 0.2 * k)
            cv.blob(0.6 * math.cos(ang), 0.6 * math.sin(ang) - 0.25, 0.13, 0.13, level=0.85)
    elif label == 5:  # row of blobs capped by a small ring
        cv.blob(-0.5, 0.1, 0.17, 0.17, level=0.85)
        cv.blob(-0.1, 0.0, 0.2, 0.2, level=0.85)
        cv.ring(0.38, -0.1, 0.2, 0.2, width=0.08, level=0.9)
    elif label == 6:  # mid-size ring beside two blobs
        cv.ring(-0.3, 0, 0.4, 0.4, width=0.09, level=0.85)
        cv.blob(0.45, 0.0, 0.2, 0.2, level=0.85)
        cv.blob(0.45, 0.45, 0.13, 0.13, level=0.85)
    elif label == 7:  # short arc of blobs ending in a ring
        for k in range(3):
            ang = math.pi * (0.15 + 0.22 * k)
            cv.blob(0.6 * math.cos(ang), 0.6 * math.sin(ang) - 0.25, 0.13, 0.13, level=0.85)
        cv.ring(-0.55, -0.15, 0.2, 0.2, width=0.08, level=0.9)
    else:
        raise ValueError(f"unknown layout {label}")


def render(label: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    cv = _Canvas(size, rng)
    _draw(label, cv)
    return cv.finish()


def sample_rng(seed: int, label: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, label, _SPLIT_CODE[split], index]))


def generate_toy(config: DataConfig | None = None, seed: int | None = None) -> Corpus:
    cfg = config or DataConfig()
    seed = cfg.seed if seed is None else seed
    counts = {"train": cfg.id_train, "val": cfg.id_val, "test": cfg.id_test}
    if min(counts.values()) <= 0 or cfg.ood_test <= 0:
        raise ValueError("per-class counts must be positive")
    if cfg.n_id_classes != len(ID_CLASSES):
        raise ValueError(f"toy corpus has exactly {len(ID_CLASSES)} ID layouts")
    plan = [(lab, split, n) for lab in range(len(ID_CLASSES)) for split, n in counts.items()]
    plan += [(len(ID_CLASSES) + k, "test", cfg.ood_test) for k in range(len(OOD_CLASSES))]
    ids, images, labels, splits, ood = [], [], [], [], []
    for label, split, n in plan:
        for i in range(n):
            img = render(label, sample_rng(seed, label, split, i), cfg.image_size)
            ids.append(f"{split}_c{label}_{i:05d}")
            images.append(img)
            labels.append(label)
            splits.append(split)
            ood.append(int(label >= len(ID_CLASSES)))
    images = from_uint8(to_uint8(np.stack(images)[:, None]))
    return Corpus(np.array(ids), images, np.array(labels, dtype=np.int64),
                  np.array(splits), np.array(ood, dtype=np.int64), seed)


# ---------------------------------------------------------------- manifests

MANIFEST_COLUMNS = ("relative_path", "label", "split", "dist_flag")


def export_manifest(corpus: Corpus, root) -> Path:
    """Write ``images/<id>.png`` files plus ``manifest.csv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in np.argsort(corpus.ids, kind="stable"):
        rel = f"images/{corpus.ids[i]}.png"
        Image.fromarray(to_uint8(corpus.images[i, 0]), mode="L").save(root / rel, optimize=False)
        rows.append((rel, int(corpus.labels[i]), corpus.splits[i], "OOD" if corpus.ood[i] else "ID"))
    path = root / "manifest.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return path


def load_manifest(path, image_size: int | None = None) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    errors: list[str] = []
    ids, images, labels, splits, ood = [], [], [], [], []
    shape = None
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                errors.append(f"row {rowno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
                continue
            rel, label, split, flag = (c.strip() for c in row)
            try:
                label = int(label)
            except ValueError:
                errors.append(f"row {rowno}: label {label!r} is not an integer")
                continue
            if split not in SPLITS:
                errors.append(f"row {rowno}: split {split!r} not in {SPLITS}")
                continue
            if flag not in ("ID", "OOD"):
                errors.append(f"row {rowno}: dist_flag {flag!r} must be ID or OOD")
                continue
            file = root / rel
            if not file.is_file():
                errors.append(f"row {rowno}: missing file {rel}")
                continue
            try:
                with Image.open(file) as im:
                    if im.mode != "L":
                        errors.append(f"row {rowno}: {rel} is not 8-bit grayscale (mode {im.mode})")
                        continue
                    arr = np.array(im)
            except OSError as exc:
                errors.append(f"row {rowno}: cannot decode {rel}: {exc}")
                continue
            expected = shape or ((image_size, image_size) if image_size else arr.shape)
            if arr.shape != expected:
                errors.append(f"row {rowno}: {rel} has shape {arr.shape}, expected {expected}")
                continue
            shape = expected
            ids.append(Path(rel).stem)
            images.append(arr)
            labels.append(label)
            splits.append(split)
            ood.append(int(flag == "OOD"))
    if errors:
        raise ManifestError(f"{path}: " + "; ".join(errors))
    if not ids:
        raise ManifestError(f"{path}: manifest has no rows")
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate sample ids")
    return Corpus(np.array(ids), from_uint8(np.stack(images)[:, None]),
                  np.array(labels, dtype=np.int64), np.array(splits), np.array(ood, dtype=np.int64))
