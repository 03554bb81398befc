"""Datasets, target/retained splits, batch plans and label flipping."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from forgetd.errors import ConfigError, IdxCountError, IdxMagicError, IdxTruncatedError, InputError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (n, channels, h, w) float64
    labels: np.ndarray  # (n,) int64
    sample_ids: np.ndarray  # (n,) uint64
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.uint64)
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise InputError(
                f"length mismatch: {n} images, {self.labels.size} labels, {self.sample_ids.size} ids"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if np.unique(self.sample_ids).size != n:
            raise InputError("sample ids are not unique")
        self._pos = None

    def __len__(self):
        return int(self.labels.size)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.sample_ids[index], self.n_classes)

    def take(self, ids) -> "Dataset":
        """Samples with the given ids, in the order given."""
        return self.subset(self.positions(ids))

    def positions(self, ids) -> np.ndarray:
        if self._pos is None:
            self._pos = {int(s): i for i, s in enumerate(self.sample_ids)}
        try:
            return np.fromiter((self._pos[int(s)] for s in ids), dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"unknown sample id {exc.args[0]}") from None

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.sample_ids, other.sample_ids)
        )


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IdxTruncatedError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def parse_idx(images_raw: bytes, labels_raw: bytes, n_classes: int | None = None, name="idx") -> Dataset:
    if len(images_raw) < 16:
        raise IdxTruncatedError(f"{name}: image header truncated")
    if len(labels_raw) < 8:
        raise IdxTruncatedError(f"{name}: label header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", images_raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxMagicError(f"{name}: expected image magic 0x{IMAGE_MAGIC:08x}, got 0x{magic:08x}")
    lmagic, ln = struct.unpack(">II", labels_raw[:8])
    if lmagic != LABEL_MAGIC:
        raise IdxMagicError(f"{name}: expected label magic 0x{LABEL_MAGIC:08x}, got 0x{lmagic:08x}")
    if ln != n:
        raise IdxCountError(f"{name}: {n} images but {ln} labels")
    need = 16 + n * rows * cols
    if len(images_raw) < need:
        raise IdxTruncatedError(f"{name}: image payload has {len(images_raw) - 16} of {need - 16} bytes")
    if len(labels_raw) < 8 + n:
        raise IdxTruncatedError(f"{name}: label payload has {len(labels_raw) - 8} of {n} bytes")
    pixels = np.frombuffer(images_raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(labels_raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels, np.arange(n, dtype=np.uint64), n_classes)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair (gzip is detected by its magic bytes).

    Pixels are scaled to [0, 1]; sample ids are ``0..n-1`` in file order.
    """
    return parse_idx(_read_maybe_gzip(images_path), _read_maybe_gzip(labels_path), n_classes, str(images_path))


def write_idx(dataset_images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path, compress=True):
    """Write uint8 images ``(n, h, w)`` and labels as an IDX pair."""
    imgs = np.ascontiguousarray(dataset_images_u8, dtype=np.uint8)
    labs = np.ascontiguousarray(labels, dtype=np.uint8)
    n, h, w = imgs.shape
    img_bytes = struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + imgs.tobytes()
    lab_bytes = struct.pack(">II", LABEL_MAGIC, n) + labs.tobytes()
    for path, payload in ((images_path, img_bytes), (labels_path, lab_bytes)):
        if compress:
            payload = gzip.compress(payload, mtime=0)
        with open(path, "wb") as fh:
            fh.write(payload)


def synth_dataset(n: int, n_classes: int, h: int, w: int, seed: int, noise: float = 1.0) -> Dataset:
    """Gaussian blobs, one per class, labels assigned round-robin.

    Class means are drawn with unit-variance entries, so the classes are
    linearly separable with high probability once ``h * w`` is moderate.
    """
    if n < n_classes:
        raise ConfigError(f"need n >= n_classes, got n={n}, C={n_classes}")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, h * w))
    labels = np.arange(n) % n_classes
    x = means[labels] + noise * rng.normal(size=(n, h * w))
    return Dataset(x.reshape(n, 1, h, w), labels, np.arange(n, dtype=np.uint64), n_classes)


@dataclass(eq=False)
class SplitPair:
    targeted: Dataset
    retained: Dataset


def split_target(ds: Dataset, selector) -> SplitPair:
    """Split by class id (int) or by an explicit collection of sample ids."""
    if isinstance(selector, (int, np.integer)):
        if not 0 <= selector < ds.n_classes:
            raise InputError(f"target class {selector} outside [0, {ds.n_classes})")
        mask = ds.labels == selector
    else:
        wanted = np.fromiter((int(s) for s in selector), dtype=np.uint64)
        mask = np.isin(ds.sample_ids, wanted)
    if not mask.any():
        raise InputError("empty target: selector matches no samples")
    return SplitPair(ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask)))


@dataclass(eq=False)
class BatchPlan:
    """``epochs[e][b]`` is the ordered array of sample ids in batch ``b``."""

    epochs: list
    batch_size: int

    @property
    def n_epochs(self) -> int:
        return len(self.epochs)

    @property
    def batches_per_epoch(self) -> int:
        return len(self.epochs[0]) if self.epochs else 0

    def __iter__(self):
        for e, batches in enumerate(self.epochs):
            for b, ids in enumerate(batches):
                yield e, b, ids

    def equals(self, other: "BatchPlan") -> bool:
        if self.batch_size != other.batch_size or self.n_epochs != other.n_epochs:
            return False
        return all(
            len(x) == len(y) and all(np.array_equal(p, q) for p, q in zip(x, y))
            for x, y in zip(self.epochs, other.epochs)
        )


def make_batch_plan(ds: Dataset, batch_size: int, n_epochs: int, seed: int) -> BatchPlan:
    """Reshuffle every epoch with a generator keyed on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if n_epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {n_epochs}")
    epochs = []
    for e in range(n_epochs):
        order = ds.sample_ids[np.random.default_rng([seed, e]).permutation(len(ds))]
        epochs.append([order[s:s + batch_size] for s in range(0, len(ds), batch_size)])
    return BatchPlan(epochs, batch_size)


def flip_labels(targeted: Dataset, n_classes: int, seed: int) -> Dataset:
    """Replace each label with one drawn uniformly from the other ``C - 1`` classes."""
    if n_classes < 2:
        raise ConfigError(f"label flipping needs at least 2 classes, got {n_classes}")
    draw = np.random.default_rng(seed).integers(0, n_classes - 1, size=len(targeted))
    flipped = draw + (draw >= targeted.labels)
    return Dataset(targeted.images, flipped, targeted.sample_ids, targeted.n_classes)
