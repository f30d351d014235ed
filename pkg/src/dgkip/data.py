"""Dataset loading, binarization, splitting and the synthetic-set file format.

Supported on-disk formats:

* IDX (MNIST / Fashion-MNIST), optionally gzip-compressed.
* CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record).
* CSV with a ``label,f0,...,f{d-1}`` header.
* The synthetic dataset format (magic ``DGK1``), see :func:`save_synthetic`.
"""

from __future__ import annotations

import csv
import gzip
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 3073

SYNTH_MAGIC = b"DGK1"
# Relaxed (real-valued) labels produced with learned labels.
SYNTH_MAGIC_REAL = b"DGK2"


class DataFormatError(ValueError):
    """Raised when a dataset file is malformed."""


@dataclass(frozen=True)
class Dataset:
    """Labeled inputs ``X`` (n x d) and labels ``y``.

    After :func:`binarize` the labels are in {-1, +1}; raw loaders return the
    original integer class ids.
    """

    inputs: np.ndarray
    labels: np.ndarray
    class_names: Optional[Tuple[int, int]] = None
    image_shape: Optional[Tuple[int, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"inputs must be 2-d, got shape {X.shape}")
        y = np.asarray(self.labels)
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if not np.all(np.isfinite(X)):
            raise ValueError("inputs contain non-finite values")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def is_binary(self) -> bool:
        return bool(np.all(np.abs(self.labels) == 1))

    def check_binary(self) -> None:
        if self.n < 1 or self.dim < 1:
            raise ValueError("dataset must have n >= 1 and d >= 1")
        if not self.is_binary():
            raise ValueError("labels must be -1 or +1")

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.class_names, self.image_shape)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 1.0
    subsample_n: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        if self.subsample_n is not None and self.subsample_n < 1:
            raise ValueError("subsample_n must be positive")


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: wrong magic for {kind} ({magic}, expected {expected_magic})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataFormatError(f"{path}: truncated file ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n = images.shape[0]
    X = images.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), image_shape=(1,) + images.shape[1:])


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (gzip if the path ends in .gz)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | a.ndim
    payload = struct.pack(">i", magic) + struct.pack(f">{a.ndim}i", *a.shape) + a.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(payload)


def load_cifar10(batch_paths: Sequence) -> Dataset:
    """Read CIFAR-10 binary batches; rows keep the stored channel-major layout."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    xs, ys = [], []
    for p in batch_paths:
        with _open(p) as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            raise DataFormatError(f"{p}: label byte > 9")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].astype(np.float64) / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys), image_shape=(3, 32, 32))


def load_csv(path) -> Dataset:
    """CSV fallback: header ``label,f0,...``; one sample per row."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DataFormatError(f"{path}: first header column must be 'label'")
        rows = [r for r in reader if r]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    if arr.shape[1] != len(header):
        raise DataFormatError(f"{path}: ragged rows")
    labels = arr[:, 0]
    if np.all(labels == np.round(labels)):
        labels = labels.astype(np.int64)
    return Dataset(arr[:, 1:], labels)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"f{j}" for j in range(ds.dim)])
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([repr(y.item())] + [repr(float(v)) for v in x])


def binarize(ds: Dataset, class_a, class_b) -> Dataset:
    """Keep rows of two classes; ``class_a`` -> +1, ``class_b`` -> -1."""
    if class_a == class_b:
        raise ValueError("class_a and class_b must differ")
    labels = ds.labels
    for c in (class_a, class_b):
        if not np.any(labels == c):
            raise ValueError(f"class {c} is absent from the dataset")
    keep = np.flatnonzero((labels == class_a) | (labels == class_b))
    y = np.where(labels[keep] == class_a, 1, -1).astype(np.int8)
    return Dataset(ds.inputs[keep], y, (class_a, class_b), ds.image_shape)


def standardize(train: Dataset, *others: Dataset):
    """Per-feature standardization fitted on ``train`` (off by default in the pipeline)."""
    mu = train.inputs.mean(axis=0)
    sd = train.inputs.std(axis=0)
    sd[sd == 0] = 1.0
    out = [Dataset((d.inputs - mu) / sd, d.labels, d.class_names, d.image_shape) for d in (train,) + others]
    return out if others else out[0]


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Optional[Dataset]]:
    """Seeded subsample (without replacement) then train/test split.

    Row order inside each part follows the original order.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    idx = np.arange(ds.n)
    if spec.subsample_n is not None and spec.subsample_n < ds.n:
        idx = np.sort(rng.choice(ds.n, size=spec.subsample_n, replace=False))
    if spec.train_fraction >= 1.0:
        return ds.subset(idx), None
    perm = rng.permutation(idx.size)
    n_train = max(1, int(round(spec.train_fraction * idx.size)))
    tr = np.sort(idx[perm[:n_train]])
    te = np.sort(idx[perm[n_train:]])
    return ds.subset(tr), (ds.subset(te) if te.size else None)


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    return split(ds, SplitSpec(1.0, n, seed))[0]


def make_blobs(n: int = 200, seed: int = 0, spread: float = 0.06) -> Dataset:
    """Two separable Gaussian blobs in [0,1]^2 separated by the line x1 = x0.

    Class +1 is centred at (0.25, 0.75), class -1 at (0.75, 0.25), so a linear
    model without intercept separates them.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    n_pos = n // 2
    y = np.concatenate([np.ones(n_pos), -np.ones(n - n_pos)]).astype(np.int8)
    centers = np.where(y[:, None] > 0, [0.25, 0.75], [0.75, 0.25])
    X = np.clip(centers + spread * rng.standard_normal((n, 2)), 0.0, 1.0)
    return Dataset(X, y, (1, -1))


# -- synthetic dataset file ---------------------------------------------------
#
# magic (4 bytes) | u32 n | u32 d | n*d f64 inputs (row-major) | labels | u32 CRC32
# Labels are n i8 values for DGK1 and n f64 values for DGK2. All little-endian.
# The CRC covers everything between the magic and the checksum.


def save_synthetic(ds: Dataset, path) -> None:
    if ds.n < 1 or ds.dim < 1:
        raise ValueError("refusing to save an empty dataset")
    y = np.asarray(ds.labels, dtype=np.float64)
    integral = np.all(np.abs(y) == 1)
    payload = struct.pack("<II", ds.n, ds.dim) + ds.inputs.astype("<f8").tobytes()
    if integral:
        magic = SYNTH_MAGIC
        payload += y.astype("<i1").tobytes()
    else:
        magic = SYNTH_MAGIC_REAL
        payload += y.astype("<f8").tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(magic + payload + struct.pack("<I", crc))


def load_synthetic(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: file too short")
    magic = raw[:4]
    if magic[:3] != b"DGK":
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if magic not in (SYNTH_MAGIC, SYNTH_MAGIC_REAL):
        raise DataFormatError(f"{path}: version mismatch ({magic!r})")
    payload, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DataFormatError(f"{path}: checksum failure")
    n, d = struct.unpack("<II", payload[:8])
    label_size = 1 if magic == SYNTH_MAGIC else 8
    if len(payload) != 8 + 8 * n * d + label_size * n:
        raise DataFormatError(f"{path}: payload length does not match header")
    X = np.frombuffer(payload, dtype="<f8", count=n * d, offset=8).reshape(n, d).astype(np.float64)
    if label_size == 1:
        y = np.frombuffer(payload, dtype="<i1", count=n, offset=8 + 8 * n * d).astype(np.int8)
    else:
        y = np.frombuffer(payload, dtype="<f8", count=n, offset=8 + 8 * n * d).astype(np.float64)
    return Dataset(X, y)
