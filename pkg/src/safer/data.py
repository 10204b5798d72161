"""Datasets: CIFAR-10 binary ingestion, a synthetic shape task, augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from safer.errors import ConfigError, FormatError

CIFAR_IMAGE_SIZE = 32
CIFAR_CHANNELS = 3
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    split: str = "train"
    source: str = "synthetic"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ConfigError(f"dataset images must be a non-empty [n, C, H, W] array, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ConfigError("dataset images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"dataset labels must lie in [0, {self.num_classes})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ConfigError("dataset images must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.source, self.num_classes)

    def batches(self, batch_size: int, seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Mini-batches; shuffled by ``seed`` when given, in order otherwise."""
        n = len(self)
        order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            yield self.images[sel], self.labels[sel]


def train_val_split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint split; the validation part holds ``round(fraction * n)`` samples."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(ds)
    n_val = int(round(fraction * n))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"validation fraction {fraction} leaves an empty split for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[n_val:]), "train"), ds.subset(np.sort(perm[:n_val]), "val")


# -- CIFAR-10 binary ---------------------------------------------------------

def record_size(image_size: int = CIFAR_IMAGE_SIZE, channels: int = CIFAR_CHANNELS) -> int:
    return 1 + channels * image_size * image_size


def decode_records(raw: bytes, image_size: int = CIFAR_IMAGE_SIZE, channels: int = CIFAR_CHANNELS,
                   num_classes: int = 10, origin: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    rs = record_size(image_size, channels)
    if len(raw) == 0 or len(raw) % rs:
        whole = len(raw) // rs * rs
        raise FormatError(
            f"{origin}: length {len(raw)} is not a multiple of the {rs}-byte record size "
            f"(trailing partial record at offset {whole})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rs)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{origin}: label byte {labels[i]} > {num_classes - 1} in record {i} (offset {i * rs})")
    images = arr[:, 1:].reshape(-1, channels, image_size, image_size).astype(np.float64) / 255.0
    return images, labels


def encode_records(ds: Dataset) -> bytes:
    """Serialize to the label-byte + channel-major-pixels record layout."""
    if ds.num_classes > 256:
        raise ConfigError("record format stores labels in one byte")
    pix = np.rint(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    out = np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1)
    return out.tobytes()


def write_records(ds: Dataset, path) -> Path:
    from safer.models.checkpoint import atomic_write

    atomic_write(path, encode_records(ds))
    return Path(path)


def load_records(path, image_size: int = CIFAR_IMAGE_SIZE, channels: int = CIFAR_CHANNELS,
                 split: str = "train", source: str = "cifar10-binary", num_classes: int = 10) -> Dataset:
    raw = Path(path).read_bytes()
    images, labels = decode_records(raw, image_size, channels, num_classes, origin=str(path))
    return Dataset(images, labels, split, source, num_classes)


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Load CIFAR-10 from a directory of ``*.bin`` batches or from a single file."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FormatError(f"missing CIFAR-10 files: {', '.join(missing)}")
    else:
        files = [path]
    parts = [decode_records(f.read_bytes(), origin=str(f)) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split, "cifar10-binary", 10)


# -- synthetic shapes --------------------------------------------------------

_SHAPES = ("square", "disk", "ring", "triangle", "cross", "xcross", "hbar", "vbar", "diamond", "corner")
_PALETTE = np.array([
    [0.90, 0.20, 0.20], [0.20, 0.75, 0.25], [0.25, 0.35, 0.90], [0.90, 0.80, 0.15], [0.80, 0.25, 0.80],
    [0.15, 0.80, 0.80], [0.95, 0.55, 0.10], [0.55, 0.35, 0.15], [0.60, 0.60, 0.60], [0.95, 0.95, 0.95],
])


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    w = max(r * 0.35, 0.8)
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - w * 1.2)
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "xcross":
        return ((np.abs(dy - dx) <= w * 1.2) | (np.abs(dy + dx) <= w * 1.2)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "hbar":
        return (np.abs(dy) <= w) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= w) & (np.abs(dy) <= r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "corner":
        return ((np.abs(dy - r + w) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx + r - w) <= w) & (np.abs(dy) <= r))
    raise ConfigError(f"unknown shape {kind!r}")


def _smooth_noise(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    coarse = rng.random((channels, size // 4 + 2, size // 4 + 2))
    # bilinear upsampling of a coarse grid gives blotchy texture
    pos = (np.arange(size) + 0.5) / 4.0
    i0 = np.floor(pos).astype(int)
    f = pos - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def synth_dataset(n: int, classes: int = 10, image_size: int = 16, seed: int = 0, channels: int = 3,
                  noise: float = 0.25, jitter: float = 2.0, color_jitter: float = 0.1,
                  label_noise: float = 0.0, split: str = "train") -> Dataset:
    """Coloured geometric shapes on textured noise.

    Class ``c`` draws shape ``c % 10`` in a colour sampled around palette
    entry ``c``; ``noise``, ``jitter`` (position, pixels) and
    ``color_jitter`` control difficulty. ``label_noise`` replaces that
    fraction of labels with a different random class.
    """
    if classes < 2:
        raise ConfigError(f"classes must be at least 2, got {classes}")
    if classes > len(_SHAPES) * len(_PALETTE):
        raise ConfigError(f"at most {len(_SHAPES) * len(_PALETTE)} classes supported")
    if n < classes:
        raise ConfigError(f"n ({n}) must be at least the number of classes ({classes})")
    if image_size < 8:
        raise ConfigError("image_size must be at least 8")
    if channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3")
    if not 0.0 <= label_noise < 1.0:
        raise ConfigError("label_noise must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.empty((n, channels, image_size, image_size))
    for i, c in enumerate(labels):
        bg = _smooth_noise(rng, image_size, channels)
        base = rng.random(channels) * 0.5 + 0.1
        img = base[:, None, None] * (1 - noise) + noise * bg
        r = image_size * (0.22 + 0.1 * rng.random())
        cy = image_size / 2 + rng.uniform(-jitter, jitter)
        cx = image_size / 2 + rng.uniform(-jitter, jitter)
        mask = _shape_mask(_SHAPES[c % len(_SHAPES)], image_size, cy, cx, r)
        color = _PALETTE[(c + c // len(_SHAPES)) % len(_PALETTE)]
        color = np.clip(color + rng.normal(0, color_jitter, 3), 0, 1)
        if channels == 1:
            color = color.mean(keepdims=True)
        img[:, mask] = color[:, None] * 0.85 + 0.15 * img[:, mask]
        images[i] = img
    images = np.clip(images, 0.0, 1.0)
    labels = labels.astype(np.int64)
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        labels[flip] = (labels[flip] + rng.integers(1, classes, flip.sum())) % classes
    return Dataset(images, labels, split, "synthetic", classes)


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    crop: int | None = None  # defaults to the input size
    hflip_prob: float = 0.5
    seed: int = 0

    def validate(self, image_size: int | None = None) -> None:
        if self.pad < 0:
            raise ConfigError(f"augment.pad must be non-negative, got {self.pad}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"augment.hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if image_size is not None and self.crop is not None and self.crop > image_size + 2 * self.pad:
            raise ConfigError(f"augment.crop ({self.crop}) exceeds the padded size ({image_size + 2 * self.pad})")


def augment(images: np.ndarray, cfg: AugmentConfig, seed: int | None = None) -> np.ndarray:
    """Reflect-pad, random crop and random horizontal flip with per-sample RNG.

    Sample ``i`` draws from ``SeedSequence([seed, i])`` so results do not
    depend on how the batch is split.
    """
    n, _, h, w = images.shape
    cfg.validate(h)
    crop = cfg.crop or h
    base = cfg.seed if seed is None else seed
    p = cfg.pad
    padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect") if p else images
    out = np.empty((n, images.shape[1], crop, crop))
    span = h + 2 * p - crop
    for i in range(n):
        rng = np.random.default_rng([base, i])
        oy, ox = rng.integers(0, span + 1, size=2)
        flip = rng.random() < cfg.hflip_prob
        patch = padded[i, :, oy:oy + crop, ox:ox + crop]
        out[i] = patch[:, :, ::-1] if flip else patch
    return out
