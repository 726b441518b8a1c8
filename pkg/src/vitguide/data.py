"""Datasets and batching.

* CIFAR binary records (the ``*.bin`` distribution): CIFAR-10 records are one
  label byte followed by 3072 pixel bytes (1024 R, 1024 G, 1024 B, each a
  row-major 32x32 plane); CIFAR-100 records carry a coarse and a fine label
  byte before the pixels, and the fine label is used.
* A synthetic dataset whose class is carried only by a small texture patch at
  a random position, so recognising it needs local features.
* Dual-resolution batches: one augmentation draw per sample, rendered at the
  student resolution and area-downsampled to the teacher resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

PIXELS = 32 * 32 * 3


class CorruptFileError(ValueError):
    pass


@dataclass
class Split:
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64, unique across the splits of one dataset
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.ids):
            raise ValueError("images, labels and ids must have the same length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "Split":
        return Split(self.images[index], self.labels[index], self.ids[index], self.num_classes)


# ---------------------------------------------------------------------- CIFAR


def _record_layout(variant: int):
    if variant == 10:
        return 1, 0, 10
    if variant == 100:
        return 2, 1, 100
    raise ValueError(f"CIFAR variant must be 10 or 100, got {variant}")


def read_cifar_records(path, variant: int = 10, id_offset: int = 0) -> Split:
    """Parse one CIFAR binary file into a :class:`Split`."""
    header, label_pos, num_classes = _record_layout(variant)
    record = header + PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        raise CorruptFileError(f"{path}: {raw.size} bytes is not a multiple of the {record}-byte record")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_pos].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise CorruptFileError(f"{path}: label {labels.max()} out of range for CIFAR-{variant}")
    images = rows[:, header:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    ids = np.arange(id_offset, id_offset + len(labels), dtype=np.int64)
    return Split(np.ascontiguousarray(images), labels, ids, num_classes)


def write_cifar_records(path, split: Split, variant: int = 10, coarse_labels: Optional[np.ndarray] = None) -> Path:
    """Write ``split`` in the CIFAR binary layout (32x32 images only)."""
    header, label_pos, num_classes = _record_layout(variant)
    if split.images.shape[1:] != (32, 32, 3):
        raise ValueError(f"CIFAR records hold 32x32x3 images, got {split.images.shape[1:]}")
    if split.num_classes > num_classes:
        raise ValueError(f"{split.num_classes} classes do not fit CIFAR-{variant}")
    n = len(split)
    rows = np.zeros((n, header + PIXELS), dtype=np.uint8)
    if header == 2:
        rows[:, 0] = 0 if coarse_labels is None else coarse_labels
    rows[:, label_pos] = split.labels
    rows[:, header:] = split.images.transpose(0, 3, 1, 2).reshape(n, PIXELS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows.tofile(path)
    return path


def load_cifar(path, variant: int = 10):
    """Load ``(train, test)`` from a directory of CIFAR ``.bin`` files."""
    root = Path(path)
    if variant == 10:
        train_files = [root / f"data_batch_{k}.bin" for k in range(1, 6)]
        test_files = [root / "test_batch.bin"]
    else:
        _record_layout(variant)
        train_files = [root / "train.bin"]
        test_files = [root / "test.bin"]
    missing = [str(f) for f in train_files + test_files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-{variant} files: {', '.join(missing)}")

    def read_all(files, offset):
        parts = []
        for f in files:
            part = read_cifar_records(f, variant, id_offset=offset)
            offset += len(part)
            parts.append(part)
        return (
            Split(
                np.concatenate([p.images for p in parts]),
                np.concatenate([p.labels for p in parts]),
                np.concatenate([p.ids for p in parts]),
                parts[0].num_classes,
            ),
            offset,
        )

    train, end = read_all(train_files, 0)
    test, _ = read_all(test_files, end)
    return train, test


# ------------------------------------------------------------------ synthetic

MOTIF_NAMES = ("horizontal", "vertical", "checker", "diagonal", "antidiagonal", "ring", "cross", "dots")


def _motif(kind: int, size: int, period: int) -> np.ndarray:
    """Binary texture in {0, 1} of shape (size, size), roughly half on."""
    y, x = np.mgrid[0:size, 0:size]
    half = period // 2
    if kind == 0:
        m = (y // half) % 2
    elif kind == 1:
        m = (x // half) % 2
    elif kind == 2:
        m = ((y // half) + (x // half)) % 2
    elif kind == 3:
        m = ((x + y) // half) % 2
    elif kind == 4:
        m = ((x - y) // half) % 2
    elif kind == 5:
        c = (size - 1) / 2
        m = (np.round(np.hypot(y - c, x - c)).astype(int) // half) % 2
    elif kind == 6:
        c = size // 2
        m = ((np.abs(y - c) < half) | (np.abs(x - c) < half)).astype(int)
    elif kind == 7:
        m = ((y % period) < half) & ((x % period) < half)
    else:
        raise ValueError(f"no motif {kind}")
    return m.astype(np.float64)


def _smooth_noise(rng: np.random.Generator, n: int, size: int, cells: int) -> np.ndarray:
    """Low-frequency colour noise: a coarse random grid upsampled bilinearly."""
    coarse = rng.uniform(0.0, 1.0, size=(n, cells, cells, 3))
    src = np.linspace(0, cells - 1, size)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, cells - 1)
    f = (src - lo)[None, :, None, None]
    rows = coarse[:, lo] * (1 - f) + coarse[:, hi] * f
    fx = (src - lo)[None, None, :, None]
    return rows[:, :, lo] * (1 - fx) + rows[:, :, hi] * fx


def synth_dataset(
    seed: int,
    n_train: int,
    n_test: int,
    classes: int = 4,
    size: int = 32,
    motif_size: int = 12,
    period: int = 4,
    noise: float = 0.12,
    contrast: tuple = (0.25, 0.6),
):
    """Deterministic ``(train, test)`` splits with balanced classes.

    Each image is smooth colour noise plus pixel noise; a ``motif_size``
    square at a uniformly random position carries a class-specific binary
    texture (stripes, checkerboard, ...) of random colour and contrast. Mean
    brightness of the patch does not depend on the class, so only its local
    structure is informative.
    """
    if not 2 <= classes <= len(MOTIF_NAMES):
        raise ValueError(f"classes must be in [2, {len(MOTIF_NAMES)}], got {classes}")
    if n_train < classes or n_test < classes:
        raise ValueError(f"need at least one sample per class (n >= {classes})")
    if motif_size > size:
        raise ValueError("motif larger than image")
    motifs = [_motif(k, motif_size, period) * 2.0 - 1.0 for k in range(classes)]

    def make(rng: np.random.Generator, n: int, id_offset: int) -> Split:
        labels = np.arange(n) % classes
        rng.shuffle(labels)
        img = 0.25 + 0.5 * _smooth_noise(rng, n, size, 4)
        top = rng.integers(0, size - motif_size + 1, size=n)
        left = rng.integers(0, size - motif_size + 1, size=n)
        amp = rng.uniform(*contrast, size=n)
        colour = rng.uniform(0.3, 1.0, size=(n, 3)) * rng.choice([-1.0, 1.0], size=(n, 1))
        for s in range(n):
            patch = motifs[labels[s]][:, :, None] * (0.5 * amp[s] * colour[s])
            img[s, top[s] : top[s] + motif_size, left[s] : left[s] + motif_size] += patch
        img += rng.normal(0.0, noise, size=img.shape)
        images = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        ids = np.arange(id_offset, id_offset + n, dtype=np.int64)
        return Split(images, labels.astype(np.int64), ids, classes)

    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    train = make(np.random.default_rng(train_seq), n_train, 0)
    test = make(np.random.default_rng(test_seq), n_test, n_train)
    return train, test


# ------------------------------------------------------------------- batching


@dataclass(frozen=True)
class Normalization:
    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, split: Split) -> "Normalization":
        x = split.images.reshape(-1, 3).astype(np.float64) / 255.0
        return cls(tuple(float(v) for v in x.mean(axis=0)), tuple(float(v) for v in x.std(axis=0) + 1e-8))

    def apply(self, images: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return ((images.astype(np.float32) / np.float32(255.0)) - mean) / std


@dataclass
class BatchView:
    student_view: np.ndarray  # (B, Hs, Ws, 3) float32
    teacher_view: np.ndarray  # (B, Ht, Wt, 3) float32
    labels: np.ndarray
    ids: np.ndarray


def _interp(n_out: int, n_in: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    m[np.arange(n_out), lo] += 1 - (src - lo)
    m[np.arange(n_out), hi] += src - lo
    return m


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Resize (N, H, W, C) float images to ``size`` x ``size``.

    Integer downscale factors use area averaging; anything else falls back to
    corner-aligned bilinear interpolation.
    """
    n, h, w, c = images.shape
    if (h, w) == (size, size):
        return images
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return images.reshape(n, size, fh, size, fw, c).mean(axis=(2, 4))
    ry, rx = _interp(size, h), _interp(size, w)
    return np.einsum("ih,nhwc,jw->nijc", ry, images, rx)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Reflect-pad by ``pad``, random crop back to size, random horizontal flip."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for k in range(n):
        crop = padded[k, dy[k] : dy[k] + h, dx[k] : dx[k] + w]
        out[k] = crop[:, ::-1] if flip[k] else crop
    return out


def make_batches(
    split: Split,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    augment_data: bool = False,
    student_res: Optional[int] = None,
    teacher_res: Optional[int] = None,
    normalization: Optional[Normalization] = None,
    shuffle: bool = True,
) -> Iterator[BatchView]:
    """Yield :class:`BatchView` batches covering ``split`` once.

    Order and augmentation draws depend only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > len(split):
        raise ValueError(f"batch size {batch_size} exceeds split size {len(split)}")
    student_res = student_res or split.size
    teacher_res = teacher_res or student_res
    norm = normalization or Normalization((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(split)) if shuffle else np.arange(len(split))
    for start in range(0, len(split), batch_size):
        idx = order[start : start + batch_size]
        raw = split.images[idx]
        if augment_data:
            raw = augment(raw, rng)
        base = raw.astype(np.float32)
        student = resize_images(base, student_res)
        teacher = resize_images(student, teacher_res)
        yield BatchView(
            norm.apply(student).astype(np.float32),
            norm.apply(teacher).astype(np.float32),
            split.labels[idx],
            split.ids[idx],
        )
