"""Dataset construction, IDX ingestion, and label/size corruption.

Datasets are immutable: every transform returns a new Dataset fully
determined by (input, parameters, seed). Fractional counts use round-half-up
with a floor of one sample.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(Exception):
    pass


class IdxFormatError(DataError):
    """Malformed IDX file; message carries the path and byte offset."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray      # [n, d], float64 in [0, 1]
    labels: np.ndarray        # [n], integer class indices
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.intp))
        if self.features.ndim != 2:
            raise DataError(f"features must be [n, d], got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"labels shape {self.labels.shape} does not match "
                            f"{self.features.shape[0]} samples")
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError("labels out of range")
        if self.features.size and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise DataError("feature values must lie in [0, 1]")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices, provenance: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes,
                       provenance if provenance is not None else self.provenance)

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(self.dim)] + ["label"])
            for row, lab in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# -- toy 2-D generators ------------------------------------------------------


def toy_two_class(n_per_class: int, pattern: str, noise_sigma: float, seed: int) -> Dataset:
    """Deterministic 2-class 2-D set in [0,1]^2: interleaved spiral arms or a
    4x4 checkerboard."""
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    if pattern == "spiral":
        pts, labels = _spiral(n_per_class, noise_sigma, rng)
    elif pattern == "checkerboard":
        pts, labels = _checkerboard(n_per_class, noise_sigma, rng)
    else:
        raise DataError(f"unknown toy pattern {pattern!r}")
    pts = np.clip(pts, 0.0, 1.0)
    return Dataset(pts, labels, 2,
                   f"toy:{pattern} n_per_class={n_per_class} noise={noise_sigma} seed={seed}")


def spiral_arm_points(n: int, arm: int) -> np.ndarray:
    """Noise-free points of one Archimedean arm, t evenly spaced on [0, 1]."""
    t = np.arange(n) / max(n - 1, 1)
    radius = 0.05 + 0.40 * t
    angle = 3.5 * np.pi * t + np.pi * arm
    return np.column_stack([0.5 + radius * np.cos(angle),
                            0.5 + radius * np.sin(angle)])


def _spiral(n_per_class, noise_sigma, rng):
    pts = np.vstack([spiral_arm_points(n_per_class, arm) for arm in (0, 1)])
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    labels = np.repeat([0, 1], n_per_class)
    return pts, labels


def _checkerboard(n_per_class, noise_sigma, rng):
    # 4x4 alternating cells; a class owns the 8 cells of its parity
    pts, labels = [], []
    for cls in (0, 1):
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == cls]
        pick = rng.integers(0, len(cells), size=n_per_class)
        offs = rng.uniform(0.0, 0.25, size=(n_per_class, 2))
        base = np.array([cells[c] for c in pick], dtype=np.float64) * 0.25
        p = base + offs
        if noise_sigma > 0:
            p = p + rng.normal(0.0, noise_sigma, size=p.shape)
        pts.append(p)
        labels.append(np.full(n_per_class, cls))
    return np.vstack(pts), np.concatenate(labels)


# -- synthetic glyph digits (offline stand-in for handwritten-digit IDX data) --

_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

GLYPH_IMAGE_SIZE = 16


def synthetic_digit_images(n: int, seed: int, noise: float = 0.25,
                           image_size: int = GLYPH_IMAGE_SIZE):
    """Render n glyph-digit images (uint8 [n, s, s]) with per-sample jitter.

    Variation per sample: integer translation, per-row pixel wobble, stroke
    dropout, an occluding blotch, intensity scaling, and additive pixel
    noise. Deterministic in seed.
    """
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    base = {d: np.array([[int(c) for c in row] for row in g], dtype=np.float64)
            for d, g in _GLYPHS.items()}
    labels = rng.integers(0, 10, size=n)
    imgs = np.zeros((n, image_size, image_size))
    gh, gw = 7 * 2, 5 * 2  # glyphs upscaled 2x
    for t in range(n):
        glyph = np.kron(base[int(labels[t])], np.ones((2, 2)))
        wobble = rng.integers(-2, 3, size=gh)
        wob = np.zeros_like(glyph)
        for r in range(gh):
            wob[r] = np.roll(glyph[r], wobble[r])
        wob *= rng.uniform(0.0, 1.0, size=wob.shape) > 0.12   # stroke dropout
        dy = rng.integers(0, image_size - gh + 1)
        dx = rng.integers(0, image_size - gw + 1)
        canvas = np.zeros((image_size, image_size))
        canvas[dy:dy + gh, dx:dx + gw] = wob * rng.uniform(0.45, 1.0)
        by, bx = rng.integers(0, image_size - 3, size=2)      # occluding blotch
        canvas[by:by + 3, bx:bx + 3] = rng.uniform(0.0, 1.0)
        canvas += rng.normal(0.0, noise, size=canvas.shape)
        imgs[t] = canvas
    imgs = np.clip(imgs, 0.0, 1.0)
    return np.round(imgs * 255.0).astype(np.uint8), labels.astype(np.intp)


def synthetic_digit_dataset(n: int, seed: int, noise: float = 0.25,
                            image_size: int = GLYPH_IMAGE_SIZE) -> Dataset:
    imgs, labels = synthetic_digit_images(n, seed, noise, image_size)
    feats = imgs.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(feats, labels, 10, f"synthetic-digits n={n} seed={seed} noise={noise}")


# -- IDX binary format -------------------------------------------------------


def _read_u32s(buf: bytes, path, offset: int, count: int):
    end = offset + 4 * count
    if len(buf) < end:
        raise IdxFormatError(f"{path}: truncated header at byte {offset}")
    return struct.unpack(f">{count}I", buf[offset:end]), end


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files; pixels scaled to [0,1] by /255."""
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lab_buf = f.read()

    (img_magic,), off = _read_u32s(img_buf, images_path, 0, 1)
    if img_magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{img_magic:08x} at byte 0 "
                             f"(expected 0x{IMAGE_MAGIC:08x})")
    (n, rows, cols), off = _read_u32s(img_buf, images_path, off, 3)
    expected = n * rows * cols
    payload = img_buf[off:]
    if len(payload) != expected:
        raise IdxFormatError(f"{images_path}: truncated payload at byte "
                             f"{off + len(payload)} (have {len(payload)} of "
                             f"{expected} pixel bytes)")

    (lab_magic,), loff = _read_u32s(lab_buf, labels_path, 0, 1)
    if lab_magic != LABEL_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{lab_magic:08x} at byte 0 "
                             f"(expected 0x{LABEL_MAGIC:08x})")
    (ln,), loff = _read_u32s(lab_buf, labels_path, loff, 1)
    lab_payload = lab_buf[loff:]
    if len(lab_payload) != ln:
        raise IdxFormatError(f"{labels_path}: truncated payload at byte "
                             f"{loff + len(lab_payload)} (have {len(lab_payload)} of "
                             f"{ln} label bytes)")
    if ln != n:
        raise IdxFormatError(f"count mismatch: {images_path} has {n} images but "
                             f"{labels_path} has {ln} labels")

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    labels = np.frombuffer(lab_payload, dtype=np.uint8).astype(np.intp)
    n_classes = int(labels.max()) + 1 if n else 2
    return Dataset(pixels.astype(np.float64) / 255.0, labels, max(2, n_classes),
                   f"idx:{images_path}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [n, rows, cols] and labels [n] as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if images.ndim != 3:
        raise DataError(f"images must be [n, rows, cols], got shape {images.shape}")
    n, rows, cols = images.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match {n} images")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


# -- corruption and splitting -------------------------------------------------


def flip_labels(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Replace round(fraction*n) labels with a uniformly chosen *different* class."""
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction must be in [0, 1], got {fraction}")
    if fraction > 0 and dataset.n_classes < 2:
        raise DataError("cannot flip labels with fewer than 2 classes")
    n = len(dataset)
    count = _round_half_up(fraction * n)
    labels = dataset.labels.copy()
    if count > 0:
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=count, replace=False)
        draw = rng.integers(0, dataset.n_classes - 1, size=count)
        labels[idx] = draw + (draw >= labels[idx])
    return Dataset(dataset.features, labels, dataset.n_classes,
                   f"{dataset.provenance}|flipped {fraction} seed={seed}")


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep max(1, round(fraction*n)) samples, original order, seed-determined."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    if fraction == 1.0:
        return dataset
    count = max(1, _round_half_up(fraction * n))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return dataset.take(idx, f"{dataset.provenance}|subsampled {fraction} seed={seed}")


def split(dataset: Dataset, holdout_count: int, seed: int):
    """Disjoint, covering (train, validation) split; holdout 0 is allowed."""
    n = len(dataset)
    if not 0 <= holdout_count < n:
        raise DataError(f"holdout_count must be in [0, {n}), got {holdout_count}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:holdout_count])
    train_idx = np.sort(perm[holdout_count:])
    return (dataset.take(train_idx, f"{dataset.provenance}|train"),
            dataset.take(val_idx, f"{dataset.provenance}|val"))
