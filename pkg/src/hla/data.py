"""IDX (MNIST-format) files, synthetic Gaussian blobs, and seeded batching."""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CountMismatchError, HLAError, TruncatedError, WrongMagicError
from .numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (N, feature_dim) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise HLAError("features must be (N, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise HLAError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype="<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(int(self.num_classes).to_bytes(4, "little"))
        return h.hexdigest()


def _header(data, magic, ndim, kind):
    need = 4 + 4 * ndim
    if len(data) < need:
        raise TruncatedError(f"{kind} file shorter than its {need}-byte header")
    (got,) = struct.unpack_from(">I", data, 0)
    if got != magic:
        raise WrongMagicError(f"{kind} file has magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndim}I", data, 4), need


def parse_idx_images(data):
    """Images as an ``(count, rows, cols)`` float array scaled to [0, 1]."""
    data = bytes(data)
    (count, rows, cols), off = _header(data, IDX_IMAGES_MAGIC, 3, "images")
    size = count * rows * cols
    if len(data) - off < size:
        raise TruncatedError(f"images payload has {len(data) - off} bytes, expected {size}")
    pix = np.frombuffer(data, dtype=np.uint8, count=size, offset=off)
    return (pix.astype(np.float64) / 255.0).reshape(count, rows, cols)


def parse_idx_labels(data):
    data = bytes(data)
    (count,), off = _header(data, IDX_LABELS_MAGIC, 1, "labels")
    if len(data) - off < count:
        raise TruncatedError(f"labels payload has {len(data) - off} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=off).astype(np.int64)


def write_idx_images(images):
    """Inverse of :func:`parse_idx_images` for images already on the 1/255 grid."""
    images = np.asarray(images)
    count, rows, cols = images.shape
    pix = np.rint(images * 255.0).clip(0, 255).astype(np.uint8) if images.dtype != np.uint8 else images
    return struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + pix.tobytes()


def write_idx_labels(labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise HLAError("IDX labels must fit in one byte")
    return struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def dataset_from_idx(images_bytes, labels_bytes, num_classes=None):
    images = parse_idx_images(images_bytes)
    labels = parse_idx_labels(labels_bytes)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.reshape(images.shape[0], images.shape[1] * images.shape[2]), labels, num_classes)


def load_idx_pair(images_path, labels_path, num_classes=None):
    return dataset_from_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), num_classes)


@dataclass
class BlobSpec:
    num_classes: int = 3
    feature_dim: int = 16
    samples_per_class: int = 500
    separation: float = 4.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_classes, self.feature_dim, self.samples_per_class) < 1:
            raise HLAError("blob counts must be positive")
        if not self.separation > 0 or self.sigma < 0:
            raise HLAError("blob separation must be > 0 and sigma >= 0")


def generate_blobs(spec):
    """Gaussian clusters around random centres on a sphere of radius ``separation``.

    Samples are grouped by class (class 0 first); use :func:`train_test_split`
    to shuffle.
    """
    rng = make_rng(spec.seed)
    centres = rng.standard_normal((spec.num_classes, spec.feature_dim))
    centres *= spec.separation / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.feature_dim))
    features = centres[labels] + spec.sigma * noise
    return Dataset(features, labels, spec.num_classes)


def train_test_split(ds, seed, test_fraction=0.2):
    """Deterministic split by a seeded permutation (80/20 by default)."""
    perm = make_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def batches(ds, batch_size, rng):
    """One seeded shuffle, then consecutive slices; the last batch may be short."""
    if batch_size < 1:
        raise HLAError("batch_size must be >= 1")
    perm = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]
