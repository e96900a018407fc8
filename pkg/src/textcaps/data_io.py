"""Dataset loading (IDX), checkpoint container, and PGM image export.

IDX files use the classic big-endian layout: magic 0x00000803 for u8 image
tensors (count, rows, cols) and 0x00000801 for u8 label vectors.  Pixels are
scaled to [0, 1] on load and quantized back with round-half-up on save.

Checkpoints are a single little-endian binary container:

    magic b"TCAP" | u32 version | u32 json_len | json (config + metadata)
    u32 n_tensors | per tensor: u16 name_len | name utf-8 | u8 ndim
                                | u32 dims... | float64 raw data

Tensors are stored as float64 regardless of training precision, so a
save/load round trip is bit-exact and equality of two checkpoint files can be
checked byte-for-byte.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"TCAP"
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    """Base for malformed input files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CheckpointVersionError(DataFormatError):
    pass


@dataclass
class LabeledImageSet:
    """Images (count, H, W) in [0, 1] with integer labels (count,)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (count, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatchError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx):
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_count)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, one_based=False, class_count=None):
    """Load an IDX image/label file pair into a :class:`LabeledImageSet`.

    ``one_based=True`` shifts labels down by one (letter datasets label a-z as
    1..26).  ``class_count`` overrides the max(label)+1 default.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: image magic {magic:#010x} != {IDX_IMAGES_MAGIC:#010x}")
        raw = _read_exact(f, count * rows * cols, "image data")
        if f.read(1):
            raise DataFormatError(f"{images_path}: trailing bytes after image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: label magic {magic:#010x} != {IDX_LABELS_MAGIC:#010x}")
        lraw = _read_exact(f, lcount, "label data")
        if f.read(1):
            raise DataFormatError(f"{labels_path}: trailing bytes after label data")
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)

    if count != lcount:
        raise CountMismatchError(f"{count} images but {lcount} labels")
    if one_based:
        labels = labels - 1
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    return LabeledImageSet(images.astype(np.float64) / 255.0, labels, class_count)


def save_idx(dataset, images_path, labels_path):
    """Write a :class:`LabeledImageSet` as an IDX pair (u8, round-half-up)."""
    imgs = np.asarray(dataset.images, dtype=np.float64)
    u8 = np.floor(np.clip(imgs, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    n, rows, cols = u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def orient_emnist(dataset):
    """Transpose each image (the letter archives store them flipped).

    Applying it twice returns the original array values.
    """
    return LabeledImageSet(
        np.transpose(dataset.images, (0, 2, 1)).copy(), dataset.labels, dataset.class_count
    )


def take_per_class(dataset, n):
    """First *n* samples of each class, in original file order.

    Emits a warning naming each class that has fewer than *n* samples; those
    classes contribute everything they have.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    keep = np.zeros(len(dataset), dtype=bool)
    for cls in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == cls)
        if idx.size < n:
            warnings.warn(
                f"class {cls} has only {idx.size} samples (wanted {n})", stacklevel=2
            )
        keep[idx[:n]] = True
    return dataset.subset(np.flatnonzero(keep))


@dataclass
class Checkpoint:
    """A trained model's weights plus enough config to rebuild it."""

    config: dict
    params: dict  # name -> float64 ndarray
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt, path):
    header = json.dumps(
        {"config": ckpt.config, "metadata": ckpt.metadata}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        head = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        (nparams,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        params = {}
        for _ in range(nparams):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(f, 8 * count, f"tensor {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(config=head["config"], params=params, metadata=head["metadata"])


def export_pgm(image, path, maxval=255):
    """Write one [0,1] grayscale image as binary PGM (P5), round-half-up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"expected a single (H, W) image, got {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(q.tobytes())
