"""Dataset ingestion: IDX files and a synthetic Gaussian-blob generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bayesfed.errors import IdxFormatError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # [n, d] float64
    y: np.ndarray  # [n] int64

    def __len__(self):
        return self.y.size

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str):
    if len(raw) < 4:
        raise IdxFormatError(f"{what}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise IdxFormatError(f"{what}: truncated payload ({len(raw) - head} of {n} bytes)")
    if len(raw) - head > n:
        raise IdxFormatError(f"{what}: {len(raw) - head - n} unexpected trailing bytes")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=n, offset=head)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    Images are flattened to one row per item and scaled to [0, 1] by
    dividing the unsigned bytes by 255.
    """
    idims, pixels = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, str(images_path))
    (n_labels,), labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if idims[0] != n_labels:
        raise IdxFormatError(f"{idims[0]} images but {n_labels} labels")
    x = pixels.reshape(idims[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 arrays as an IDX pair. ``images`` is ``[n, rows, cols]``."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def class_means(classes: int, dims: int, scale: float = 1.0) -> np.ndarray:
    """Scaled simplex vertices ``scale * e_c``, zero-padded to ``dims``."""
    if classes < 2:
        raise UsageError("need at least two classes")
    if dims < classes:
        raise UsageError(f"dims ({dims}) must be >= classes ({classes}) for simplex class means")
    means = np.zeros((classes, dims))
    means[np.arange(classes), np.arange(classes)] = scale
    return means


def generate_synthetic(
    classes: int, dims: int, samples_per_class: int, spread: float, seed=0, scale: float = 1.0
) -> Dataset:
    """Isotropic Gaussian blobs of std ``spread`` around simplex vertices, shuffled."""
    means = class_means(classes, dims, scale)
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), samples_per_class)
    x = means[y] + spread * rng.standard_normal((y.size, dims))
    order = rng.permutation(y.size)
    return Dataset(x[order], y[order].astype(np.int64))
