"""MNIST / CIFAR-10 ingestion, augmentation, and a synthetic offline fallback."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, IngestionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledDataset:
    """Images ``(N, H, W, C)`` in [0, 1] with integer labels in [0, 10)."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ContractError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise ContractError("labels must lie in [0, 10)")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index):
        return LabeledDataset(self.images[index], self.labels[index], self.provenance)

    def head(self, n):
        return self.subset(slice(0, n))


# -- IDX (MNIST) -----------------------------------------------------------


def _read_bytes(path):
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise IngestionError(f"{path}: corrupt gzip stream ({exc})") from None
    return data


def parse_idx(data, expected_magic):
    """Decode an unsigned-byte IDX buffer into an ndarray of uint8.

    Rejects wrong magic, truncation and trailing bytes; never reads past the
    declared payload.
    """
    if len(data) < 4:
        raise IngestionError("IDX file shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IngestionError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IngestionError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
    payload = len(data) - header
    if payload < count:
        raise IngestionError(f"IDX payload truncated: {payload} of {count} bytes")
    if payload > count:
        raise IngestionError(f"IDX payload has {payload - count} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def parse_mnist(image_bytes, label_bytes):
    images = parse_idx(image_bytes, IDX_IMAGES_MAGIC)
    labels = parse_idx(label_bytes, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"image file holds {images.shape[0]} samples, label file {labels.shape[0]}")
    if labels.size and labels.max() > 9:
        raise IngestionError(f"label byte {labels.max()} out of range")
    x = images.astype(np.float64)[..., None] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), "mnist")


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = Path(directory) / candidate
        if p.exists():
            return p
    raise IngestionError(f"no file named {stem}[.gz] in {directory}")


def load_mnist(path, split="train"):
    """Load the MNIST ``split`` ('train' or 't10k'/'test') from a directory of IDX files."""
    split = "test" if split in ("t10k", "test") else split
    if split not in _MNIST_FILES:
        raise ContractError(f"unknown MNIST split {split!r}")
    img_name, lbl_name = _MNIST_FILES[split]
    return parse_mnist(_read_bytes(_find(path, img_name)), _read_bytes(_find(path, lbl_name)))


# -- CIFAR-10 binary -------------------------------------------------------


def parse_cifar10(data):
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise IngestionError(f"CIFAR-10 file length {len(data)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise IngestionError(f"label byte {labels.max()} out of range")
    planar = records[:, 1:].reshape(-1, 3, 32, 32)
    images = planar.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, "cifar10")


def load_cifar10(path, split="train"):
    """Load a CIFAR-10 binary batch file, or every batch of ``split`` in a directory."""
    p = Path(path)
    if p.is_file():
        return parse_cifar10(p.read_bytes())
    names = ["test_batch.bin"] if split == "test" else [f"data_batch_{i}.bin" for i in range(1, 6)]
    parts = []
    for name in names:
        f = p / name
        if not f.exists():
            raise IngestionError(f"missing CIFAR-10 batch {f}")
        parts.append(parse_cifar10(f.read_bytes()))
    return LabeledDataset(np.concatenate([d.images for d in parts]),
                          np.concatenate([d.labels for d in parts]), "cifar10")


# -- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = 0.0
    max_shift: float = 0.0
    horizontal_flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_rotation < 0:
            raise ContractError("max_rotation must be non-negative")
        if not 0.0 <= self.max_shift < 1.0:
            raise ContractError("max_shift must lie in [0, 1)")


CIFAR_AUGMENT = AugmentConfig(max_rotation=15.0, max_shift=0.1, horizontal_flip=True)


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment_images(images, cfg, rng):
    """Randomly rotate, shift and flip each image; returns a new array."""
    out = np.array(images, dtype=np.float64, copy=True)
    n, h, w = out.shape[:3]
    max_dy, max_dx = int(np.floor(cfg.max_shift * h)), int(np.floor(cfg.max_shift * w))
    for i in range(n):
        img = out[i]
        if cfg.max_rotation > 0:
            angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
            img = rotate(img, angle)
        if max_dy or max_dx:
            img = _shift(img, int(rng.integers(-max_dy, max_dy + 1)), int(rng.integers(-max_dx, max_dx + 1)))
        if cfg.horizontal_flip and rng.random() < 0.5:
            img = img[:, ::-1]
        out[i] = img
    return np.clip(out, 0.0, 1.0)


def rotate(img, angle):
    """Bilinear rotation about the image centre with zero fill."""
    return ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def augment(data, cfg):
    rng = np.random.default_rng(cfg.seed)
    return LabeledDataset(augment_images(data.images, cfg, rng), data.labels.copy(), data.provenance)


# -- synthetic glyphs ------------------------------------------------------

# seven-segment layout: a top, b upper right, c lower right, d bottom,
# e lower left, f upper left, g middle
_SEGMENTS = {
    "a": ((0.0, 0.0), (1.0, 0.0)),
    "b": ((1.0, 0.0), (1.0, 0.5)),
    "c": ((1.0, 0.5), (1.0, 1.0)),
    "d": ((0.0, 1.0), (1.0, 1.0)),
    "e": ((0.0, 0.5), (0.0, 1.0)),
    "f": ((0.0, 0.0), (0.0, 0.5)),
    "g": ((0.0, 0.5), (1.0, 0.5)),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _render(label, size, rng):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    yy, xx = yy / size, xx / size
    width = rng.uniform(0.3, 0.45)
    height = rng.uniform(0.55, 0.7)
    x0 = rng.uniform(0.5 - width / 2 - 0.06, 0.5 - width / 2 + 0.06)
    y0 = rng.uniform(0.5 - height / 2 - 0.06, 0.5 - height / 2 + 0.06)
    slant = rng.uniform(-0.15, 0.15)
    thick = rng.uniform(0.04, 0.07)
    img = np.zeros((size, size))
    for seg in _DIGITS[label]:
        (ax, ay), (bx, by) = _SEGMENTS[seg]
        p0 = np.array([x0 + ax * width + slant * (1 - ay) * height, y0 + ay * height])
        p1 = np.array([x0 + bx * width + slant * (1 - by) * height, y0 + by * height])
        d = p1 - p0
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / (d @ d), 0.0, 1.0)
        dist = np.hypot(xx - p0[0] - t * d[0], yy - p0[1] - t * d[1])
        img = np.maximum(img, np.clip(1.0 - (dist - thick) * size / 1.5, 0.0, 1.0))
    return img


def make_synthetic(n, seed=0, shape=(28, 28, 1)):
    """Procedural digit-like glyphs, 10 classes, balanced to within one sample."""
    if n < 10:
        raise ContractError(f"need at least 10 samples (one per class), got {n}")
    h, w, c = shape
    if h != w:
        raise ContractError("synthetic glyphs are square")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10)
    images = np.empty((n, h, w, c))
    for i, label in enumerate(labels):
        glyph = _render(int(label), h, rng)
        if c == 1:
            img = glyph[..., None]
        else:
            fg = rng.uniform(0.5, 1.0, size=c)
            bg = rng.uniform(0.0, 0.3, size=c)
            img = glyph[..., None] * fg + (1.0 - glyph[..., None]) * bg
        noise = rng.normal(0.0, 0.03, size=img.shape)
        images[i] = np.clip(img + noise, 0.0, 1.0)
    return LabeledDataset(images, labels, "synthetic")
