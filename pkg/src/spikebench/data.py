"""Datasets: IDX and CIFAR binary parsers, synthetic blobs, sequential serialization.

Images are held as float32 ``[n, C, H, W]`` in [0, 1]; sequential datasets as
``[n, C, L]``. ``ids`` are stable per-sample indices used to key rate encoding.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, LengthError

DATASET_KINDS = ("synthetic_blobs", "idx_images", "cifar_binary")
IDX_IMAGES = b"\x00\x00\x08\x03"
IDX_LABELS = b"\x00\x00\x08\x01"
CIFAR_RECORD = 1 + 3072


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images, {len(self.labels)} labels, {len(self.ids)} ids")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.ids[index], self.num_classes)


@dataclass
class DatasetSpec:
    kind: str = "synthetic_blobs"
    path: str | None = None
    sequential: bool = False
    permute_seed: int | None = None
    n_train: int | None = None
    n_test: int | None = None
    num_classes: int = 10
    img_size: int = 28
    in_channels: int = 1
    noise: float = 0.1
    seed: int = 0
    mean: list = field(default_factory=lambda: [0.0])
    std: list = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.permute_seed is not None and not self.sequential:
            raise ConfigError("permute_seed requires sequential: true")
        if any(not s > 0 for s in self.std):
            raise ConfigError(f"normalization std must be positive, got {self.std}")
        # every encoder is defined on raw [0, 1] intensities, so only the identity is accepted
        if any(m != 0 for m in self.mean) or any(s != 1 for s in self.std):
            raise ConfigError("spike encoders take [0, 1] intensities; set mean: [0] and std: [1]")


# -- IDX --------------------------------------------------------------------------------


def _open(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(path, expect: bytes | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) of unsigned bytes into a uint8 array."""
    raw = _open(path)
    magic = raw[:4]
    if expect is not None and magic != expect:
        raise FormatError(f"{path}: magic {magic.hex(' ')} but expected {expect.hex(' ')}")
    if len(magic) < 4 or magic[:2] != b"\x00\x00" or magic[2] != 0x08:
        raise FormatError(f"{path}: magic {magic.hex(' ')} is not an unsigned-byte IDX header (00 00 08 xx)")
    ndim = magic[3]
    if len(raw) < 4 + 4 * ndim:
        raise LengthError(f"{path}: header truncated")
    shape = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    count = math.prod(shape)
    body = len(raw) - 4 - 4 * ndim
    if body != count:
        raise LengthError(f"{path}: header declares {count} bytes of data, file holds {body}")
    return np.frombuffer(raw, np.uint8, count, 4 + 4 * ndim).reshape(shape)


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = load_idx(images_path, IDX_IMAGES)
    labels = load_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise LengthError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels, num_classes=num_classes)


def find_idx_split(root, split: str) -> tuple[Path, Path]:
    root = Path(root)
    hits = {}
    for what in ("images", "labels"):
        found = sorted(root.glob(f"*{split}*{what}*")) or sorted(root.glob(f"{split}*{what[:3]}*"))
        if not found:
            raise ConfigError(f"no {split} {what} IDX file under {root}")
        hits[what] = found[0]
    return hits["images"], hits["labels"]


# -- CIFAR ------------------------------------------------------------------------------


def load_cifar_binary(paths, num_classes: int = 10) -> Dataset:
    """Records of 1 label byte + 3072 pixel bytes (R, G, B planes of 32x32)."""
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    chunks = []
    for p in paths:
        raw = _open(p)
        if len(raw) % CIFAR_RECORD:
            raise LengthError(f"{p}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
        chunks.append(np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} out of range for {num_classes} classes")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes=num_classes)


# -- synthetic ---------------------------------------------------------------------------


def synthetic_blobs(n_per_class: int, num_classes: int = 2, size: int = 16, channels: int = 1,
                    noise: float = 0.1, seed: int = 0) -> Dataset:
    """Each class is a Gaussian bump at its own location; samples jitter the centre and add pixel noise.

    Class centres sit on a circle, so the classes are separable by the position of their mass.
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radius = size / 4
    centres = size / 2 - 0.5 + radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    sigma = size / 8
    yy, xx = np.mgrid[0:size, 0:size]
    labels = np.repeat(np.arange(num_classes), n_per_class)
    jitter = rng.normal(scale=size / 32, size=(len(labels), 2))
    cy = (centres[labels, 0] + jitter[:, 0])[:, None, None]
    cx = (centres[labels, 1] + jitter[:, 1])[:, None, None]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    images = bump[:, None] + rng.normal(scale=noise, size=(len(labels), channels, size, size))
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], num_classes=num_classes)


# -- sequential --------------------------------------------------------------------------


def sequence_permutation(length: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(length)


def serialize_sequence(images: np.ndarray, permute_seed: int | None = None) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., C, H*W]`` in row-major pixel order, optionally permuted."""
    images = np.asarray(images)
    if images.ndim < 3:
        raise ConfigError(f"expected [..., C, H, W], got shape {images.shape}")
    seq = images.reshape(*images.shape[:-2], images.shape[-2] * images.shape[-1])
    if permute_seed is not None:
        seq = seq[..., sequence_permutation(seq.shape[-1], permute_seed)]
    return seq


def serialize_dataset(data: Dataset, permute_seed: int | None = None) -> Dataset:
    return Dataset(serialize_sequence(data.images, permute_seed), data.labels, data.ids, data.num_classes)


def load_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Train and test splits for ``spec``."""
    if spec.kind == "synthetic_blobs":
        n_train = spec.n_train or 20 * spec.num_classes
        n_test = spec.n_test or 10 * spec.num_classes
        per_class = -(-(n_train + n_test) // spec.num_classes)
        full = synthetic_blobs(per_class, spec.num_classes, spec.img_size, spec.in_channels, spec.noise, spec.seed)
        train, test = full.subset(slice(0, n_train)), full.subset(slice(n_train, n_train + n_test))
    else:
        if spec.path is None:
            raise ConfigError(f"dataset kind {spec.kind!r} needs data_dir")
        if spec.kind == "idx_images":
            train = load_idx_dataset(*find_idx_split(spec.path, "train"), num_classes=spec.num_classes)
            test = load_idx_dataset(*find_idx_split(spec.path, "test"), num_classes=spec.num_classes)
            test.ids = test.ids + len(train)  # keep rate-encoding keys distinct across splits
        else:
            root = Path(spec.path)
            train = load_cifar_binary(sorted(root.glob("data_batch_*.bin")), spec.num_classes)
            test = load_cifar_binary(sorted(root.glob("test_batch*.bin")), spec.num_classes)
            test.ids = test.ids + len(train)
        if spec.n_train is not None:
            train = train.subset(slice(0, spec.n_train))
        if spec.n_test is not None:
            test = test.subset(slice(0, spec.n_test))
    if spec.sequential:
        train, test = serialize_dataset(train, spec.permute_seed), serialize_dataset(test, spec.permute_seed)
    return train, test
