"""Dataset ingestion: synthetic textures, CIFAR-10 binary, raw IMGB files.

Every decoded image is float32 NCHW in [0, 1] (u8 pixels are divided by
255, so byte 255 maps to exactly 1.0).  The synthetic generator is the
zero-download path: class-colored oriented gratings with per-image phase,
color and noise jitter, built entirely from an explicit seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng


class DataError(ValueError):
    """Unreadable, truncated, or out-of-contract dataset input."""


@dataclass
class ImageBatch:
    """NCHW pixels in [0, 1] plus optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.images)


class Dataset:
    """In-memory image collection with deterministic batching."""

    def __init__(self, images: np.ndarray, labels: np.ndarray | None):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise DataError(f"images must be NCHW, got shape {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataError("pixel values outside [0, 1]")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (len(images),):
                raise DataError(f"labels shape {labels.shape} does not match {len(images)} images")
        self.images = images
        self.labels = labels

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise DataError("dataset has no labels")
        return int(self.labels.max()) + 1

    def take(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], None if self.labels is None else self.labels[:n])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx])

    def batches(self, batch_size: int, rng: SeededRng | None = None):
        """Yield ImageBatches in stored order, or shuffled when rng is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield ImageBatch(self.images[idx],
                             None if self.labels is None else self.labels[idx])

    def sample(self, batch_size: int, rng: SeededRng) -> ImageBatch:
        """One uniformly sampled batch (with replacement); training-loop use."""
        idx = rng.integers(0, len(self), size=batch_size)
        return ImageBatch(self.images[idx],
                          None if self.labels is None else self.labels[idx])


# ---------------------------------------------------------------------------
# Synthetic textures


@dataclass(frozen=True)
class SyntheticConfig:
    """Class-colored oriented gratings; tuned so a small conv net separates
    them cleanly while a 16/255 perceptual perturbation does real damage."""

    num_classes: int = 4
    image_size: int = 32
    texture_amp: float = 0.14
    color_amp: float = 0.08
    frequency: float = 4.0
    pixel_noise: float = 0.05
    brightness_jitter: float = 0.04


def make_synthetic(n: int, seed: int, config: SyntheticConfig = SyntheticConfig()) -> Dataset:
    rng = SeededRng(seed)
    k = config.num_classes
    s = config.image_size
    labels = rng.integers(0, k, size=n).astype(np.int64)

    # stable per-class style: orientation, channel emphasis, color offset
    angles = np.pi * np.arange(k) / k
    base_dirs = np.array([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, -1.0, 1.0],
                          [1.0, 0.0, -1.0], [-1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
    color = config.color_amp * base_dirs[np.arange(k) % len(base_dirs)]
    chan_w = np.stack([np.roll(np.array([1.0, 0.7, 0.4]), i % 3) for i in range(k)])

    u, v = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    images = np.empty((n, 3, s, s), dtype=np.float32)
    for i in range(n):
        c = int(labels[i])
        freq = config.frequency * (1.0 + float(rng.uniform((), -0.1, 0.1)))
        phase = float(rng.uniform((), 0.0, 2.0 * np.pi))
        wave = np.sin(2.0 * np.pi * freq * (u * np.cos(angles[c]) + v * np.sin(angles[c])) / s + phase)
        bright = float(rng.uniform((), -config.brightness_jitter, config.brightness_jitter))
        noise = rng.uniform((3, s, s), -config.pixel_noise, config.pixel_noise)
        img = (0.5 + bright + color[c][:, None, None]
               + config.texture_amp * chan_w[c][:, None, None] * wave[None] + noise)
        images[i] = img
    return Dataset(np.clip(images, 0.0, 1.0), labels)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format (3073-byte records: 1 label byte + 3072 pixel bytes)


_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILES = ["test_batch.bin"]
_CIFAR_RECORD = 3073


def load_cifar10(directory: str, split: str = "train") -> Dataset:
    files = _CIFAR_TRAIN_FILES if split == "train" else _CIFAR_TEST_FILES
    paths = [os.path.join(directory, f) for f in files]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DataError(f"missing CIFAR-10 file(s): {missing}")
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
            raise DataError(f"truncated CIFAR-10 file {path}: {raw.size} bytes")
        rec = raw.reshape(-1, _CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.max() > 9:
            raise DataError(f"label out of range in {path}")
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels))


# ---------------------------------------------------------------------------
# IMGB raw container: magic "IMGB", u32 LE count/C/H/W, u8 labels, u8 pixels


_IMGB_MAGIC = b"IMGB"


def write_imgb(path: str, images: np.ndarray, labels: np.ndarray | None = None):
    """Serialize a batch as u8; pixels are clipped to [0, 1] and rounded."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DataError(f"images must be NCHW, got shape {images.shape}")
    n, c, h, w = images.shape
    if labels is None:
        labels = np.zeros(n, dtype=np.uint8)
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} does not match {n} images")
    if labels.min() < 0 or labels.max() > 255:
        raise DataError("IMGB labels must fit in a byte")
    header = _IMGB_MAGIC + np.array([n, c, h, w], dtype="<u4").tobytes()
    pixels = np.clip(np.round(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    payload = header + labels.astype(np.uint8).tobytes() + pixels.tobytes()
    _atomic_write(path, payload)


def read_imgb(path: str) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != _IMGB_MAGIC:
        raise DataError(f"{path}: not an IMGB container")
    n, c, h, w = np.frombuffer(blob[4:20], dtype="<u4")
    expected = 20 + n + n * c * h * w
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")
    labels = np.frombuffer(blob[20 : 20 + n], dtype=np.uint8).astype(np.int64)
    pixels = np.frombuffer(blob[20 + n :], dtype=np.uint8).reshape(int(n), int(c), int(h), int(w))
    return Dataset(pixels.astype(np.float32) / 255.0, labels)


def _atomic_write(path: str, payload: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Handle-based loading


@dataclass(frozen=True)
class DatasetHandle:
    """Declarative dataset reference: source kind, location, split, size."""

    source: str = "synthetic"
    path: str | None = None
    split: str = "train"
    size: int = 1024
    seed: int = 0
    num_classes: int = 4

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10", "imgb"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if self.split not in ("train", "test"):
            raise DataError(f"unknown split {self.split!r}")


def load_dataset(handle: DatasetHandle) -> Dataset:
    if handle.source == "synthetic":
        # distinct, fixed seeds per split so train/test never overlap
        seed = handle.seed * 2 + (0 if handle.split == "train" else 1)
        return make_synthetic(handle.size, seed, SyntheticConfig(num_classes=handle.num_classes))
    if handle.path is None:
        raise DataError(f"{handle.source} dataset needs a path")
    if handle.source == "cifar10":
        return load_cifar10(handle.path, handle.split)
    return read_imgb(handle.path)


def random_crop(images: np.ndarray, size: int, rng: SeededRng) -> np.ndarray:
    """Per-image random crop to size x size (augmentation for training)."""
    n, c, h, w = images.shape
    if size > h or size > w:
        raise DataError(f"crop {size} exceeds image extent {h}x{w}")
    if size == h and size == w:
        return images
    tops = rng.integers(0, h - size + 1, size=n)
    lefts = rng.integers(0, w - size + 1, size=n)
    out = np.empty((n, c, size, size), dtype=images.dtype)
    for i in range(n):
        out[i] = images[i, :, tops[i] : tops[i] + size, lefts[i] : lefts[i] + size]
    return out
