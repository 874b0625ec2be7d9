"""MNIST IDX and CIFAR-10 binary readers/writers, plus seeded minibatching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from latkit.errors import BadMagicError, CountMismatchError, InputError, ParseError, TruncatedError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3
NUM_CLASSES = 10


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images (N, H, W, C) float32 in [0, 1] and integer labels (N,)."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.name, dict(self.meta))

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _idx_header(raw: bytes, magic: int, ndim: int, path) -> tuple:
    need = 4 * (1 + ndim)
    if len(raw) >= 4:
        got = struct.unpack(">I", raw[:4])[0]
        if got != magic:
            raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < need:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    return struct.unpack(f">{ndim}I", raw[4:need])


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 pixels, shape (N, rows, cols)."""
    raw = _read(path)
    count, rows, cols = _idx_header(raw, IDX_IMAGES_MAGIC, 3, path)
    payload = raw[16:]
    size = count * rows * cols
    if len(payload) < size:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {size}")
    if len(payload) > size:
        raise ParseError(f"{path}: {len(payload) - size} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    (count,) = _idx_header(raw, IDX_LABELS_MAGIC, 1, path)
    payload = raw[8:]
    if len(payload) < count:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    if len(payload) > count:
        raise ParseError(f"{path}: {len(payload) - count} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def to_unit(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Nearest byte value for pixels in [0, 1]."""
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_mnist(images_path, labels_path, name: str = "mnist") -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images in {images_path} but {len(labels)} labels in {labels_path}")
    if labels.size and labels.max() >= NUM_CLASSES:
        raise ParseError(f"{labels_path}: label {labels.max()} out of range")
    return Dataset(to_unit(pixels)[..., None], labels.astype(np.int64), name)


def write_mnist(dataset: Dataset, images_path, labels_path, pixels: np.ndarray | None = None) -> None:
    """Write IDX files. ``pixels`` overrides the byte conversion of ``dataset.images``."""
    h, w, c = dataset.image_shape
    if c != 1:
        raise InputError(f"IDX images must have one channel, got {c}")
    if pixels is None:
        pixels = to_bytes(dataset.images)
    n = len(dataset)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).reshape(n, h, w).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def read_cifar10_file(path):
    raw = _read(path)
    if len(raw) % CIFAR_RECORD:
        raise ParseError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"{path}: record {bad} has label byte {labels[bad]}")
    # channel-planar R, G, B -> H x W x C
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels, labels


def load_cifar10(bin_paths, name: str = "cifar10") -> Dataset:
    if isinstance(bin_paths, (str, os.PathLike)):
        bin_paths = [bin_paths]
    parts = [read_cifar10_file(p) for p in bin_paths]
    if not parts:
        raise InputError("no CIFAR-10 files given")
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    return Dataset(to_unit(pixels), labels.astype(np.int64), name)


def write_cifar10(dataset: Dataset, path, pixels: np.ndarray | None = None) -> None:
    if dataset.image_shape != (32, 32, 3):
        raise InputError(f"CIFAR-10 images are 32x32x3, got {dataset.image_shape}")
    if pixels is None:
        pixels = to_bytes(dataset.images)
    n = len(dataset)
    records = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = np.asarray(dataset.labels, dtype=np.uint8)
    records[:, 1:] = np.asarray(pixels, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


# ---------------------------------------------------------------------------
# minibatching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 50
    shuffle_seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")


def epoch_order(n: int, plan: BatchPlan) -> np.ndarray:
    rng = np.random.default_rng([plan.shuffle_seed, plan.epoch])
    return rng.permutation(n)


def minibatches(dataset: Dataset, plan: BatchPlan):
    """Index arrays for one epoch; the last batch may be short."""
    n = len(dataset)
    if n == 0:
        raise InputError("cannot batch an empty dataset")
    if plan.batch_size > n:
        raise InputError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    order = epoch_order(n, plan)
    return [order[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]


def batch_stream(dataset: Dataset, batch_size: int, seed: int):
    """Endless stream of index batches, epoch after epoch."""
    epoch = 0
    while True:
        yield from minibatches(dataset, BatchPlan(batch_size, seed, epoch))
        epoch += 1
