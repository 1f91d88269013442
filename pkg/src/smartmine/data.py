"""Labelled feature tables, synthetic generation and on-disk formats.

Text format::

    N dim num_classes
    label v1 v2 ... vdim        (N lines, floats written with repr)

Binary format: ``b"SMDS"``, then uint32 version, N, dim, num_classes, then N
int32 labels and N*dim float32 values, all little-endian.

Split tags are not stored; they follow from the labels: the lower half of
the sorted class ids is the training split and the rest is the test split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "validation", "test")

_BIN_MAGIC = b"SMDS"
_BIN_VERSION = 1
_BIN_HEADER = "<4sIIII"


def default_splits(labels) -> np.ndarray:
    """First half of the sorted classes train, second half test."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n_train = (len(classes) + 1) // 2
    return np.where(np.isin(labels, classes[:n_train]), TRAIN, TEST).astype(np.int8)


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int8)
        if self.features.ndim != 2:
            raise ConfigError("features must be a 2-d table")
        n = len(self.features)
        if len(self.labels) != n or len(self.splits) != n:
            raise ConfigError(
                f"{len(self.labels)} labels and {len(self.splits)} split tags for {n} feature rows"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        train = self.labels[self.splits == TRAIN]
        if len(train):
            _, counts = np.unique(train, return_counts=True)
            if counts.min() < 2:
                raise ConfigError("every training class needs at least two samples")
        test_classes = set(self.labels[self.splits == TEST].tolist())
        if test_classes & set(train.tolist()):
            raise ConfigError("training and test classes overlap")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def split(self, tag: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == tag
        return self.features[mask], self.labels[mask]

    def with_validation(self, fraction: float = 0.1, minimum: int = 2) -> Dataset:
        """Move the highest-numbered training classes into a validation split."""
        splits = self.splits.copy()
        splits[splits == VALIDATION] = TRAIN
        classes = np.unique(self.labels[splits == TRAIN])
        if fraction <= 0:
            return Dataset(self.features, self.labels, splits, self.num_classes)
        count = max(minimum, int(round(fraction * len(classes))))
        if count > len(classes) - 2:
            raise ConfigError(
                f"cannot hold out {count} of {len(classes)} training classes for validation"
            )
        splits[np.isin(self.labels, classes[len(classes) - count:])] = VALIDATION
        return Dataset(self.features, self.labels, splits, self.num_classes)

    def equals(self, other: Dataset) -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
        )


def generate_synthetic(num_classes: int, per_class: int, input_dim: int,
                       cluster_spread: float, seed: int, nuisance: float = 0.0,
                       outliers: float = 0.0) -> Dataset:
    """Gaussian clusters around unit-norm centres drawn uniformly on the sphere.

    ``nuisance`` adds extra noise of that standard deviation inside a fixed
    random subspace of half the input dimensions, shared by every class. An
    embedding that learns to suppress this subspace on training classes also
    helps on unseen ones.

    ``outliers`` is the fraction of points sampled around the centre of a
    different random class while keeping their own label, i.e. ambiguous or
    mislabelled samples.
    """
    if num_classes < 2 or per_class < 2 or input_dim < 1:
        raise ConfigError("need >= 2 classes, >= 2 points per class and input_dim >= 1")
    if cluster_spread < 0 or nuisance < 0 or not 0.0 <= outliers < 1.0:
        raise ConfigError("cluster_spread, nuisance >= 0 and outliers in [0, 1) required")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(num_classes, input_dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(size=(len(labels), input_dim))
    source = labels.copy()
    if outliers > 0:
        moved = rng.random(len(labels)) < outliers
        shift = rng.integers(1, num_classes, size=len(labels))
        source = np.where(moved, (labels + shift) % num_classes, labels)
    X = centres[source] + cluster_spread * noise
    if nuisance > 0:
        q, _ = np.linalg.qr(rng.normal(size=(input_dim, input_dim)))
        basis = q[:, : max(1, input_dim // 2)]
        X += nuisance * rng.normal(size=(len(labels), basis.shape[1])) @ basis.T
    return Dataset(X, labels, default_splits(labels), num_classes)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    if path.suffix == ".bin":
        return save_binary(dataset, path)
    lines = [f"{len(dataset)} {dataset.dim} {dataset.num_classes}"]
    for y, row in zip(dataset.labels, dataset.features):
        lines.append(" ".join([str(int(y))] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n")


def _parse_header(line: bytes, offset: int) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError("header must be 'N dim num_classes'", offset)
    try:
        n, dim, c = (int(p) for p in parts)
    except ValueError:
        raise ParseError("header fields must be integers", offset) from None
    if n < 0 or dim < 1 or c < 1:
        raise ParseError("header values out of range", offset)
    return n, dim, c


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _BIN_MAGIC:
        return _load_binary(raw)
    lines = raw.split(b"\n")
    offsets = np.cumsum([0] + [len(x) + 1 for x in lines]).tolist()
    if not lines or not lines[0].strip():
        raise ParseError("missing header", 0)
    n, dim, num_classes = _parse_header(lines[0], 0)
    body = [(i, ln) for i, ln in enumerate(lines[1:], start=1) if ln.strip()]
    if len(body) != n:
        raise ParseError(f"header declares {n} rows but {len(body)} were found", len(raw))
    labels = np.empty(n, dtype=np.int64)
    X = np.empty((n, dim))
    for r, (i, ln) in enumerate(body):
        parts = ln.split()
        if len(parts) != dim + 1:
            raise ParseError(f"row {r} has {len(parts) - 1} values, expected {dim}", offsets[i])
        try:
            labels[r] = int(parts[0])
            X[r] = [float(p) for p in parts[1:]]
        except ValueError:
            raise ParseError(f"row {r} contains a malformed number", offsets[i]) from None
    if not raw.endswith(b"\n"):
        raise ParseError("file does not end with a newline (truncated?)", len(raw))
    return Dataset(X, labels, default_splits(labels), num_classes)


def save_binary(dataset: Dataset, path) -> None:
    head = struct.pack(_BIN_HEADER, _BIN_MAGIC, _BIN_VERSION, len(dataset), dataset.dim,
                       dataset.num_classes)
    body = dataset.labels.astype("<i4").tobytes() + dataset.features.astype("<f4").tobytes()
    Path(path).write_bytes(head + body)


def _load_binary(raw: bytes) -> Dataset:
    hsize = struct.calcsize(_BIN_HEADER)
    if len(raw) < hsize:
        raise ParseError("binary header truncated", len(raw))
    _, version, n, dim, c = struct.unpack_from(_BIN_HEADER, raw, 0)
    if version != _BIN_VERSION:
        raise ParseError(f"unsupported binary version {version}", 4)
    need = hsize + 4 * n + 4 * n * dim
    if len(raw) < need:
        raise ParseError("binary payload truncated", len(raw))
    if len(raw) > need:
        raise ParseError("trailing bytes after binary payload", need)
    labels = np.frombuffer(raw, "<i4", n, hsize).astype(np.int64)
    X = np.frombuffer(raw, "<f4", n * dim, hsize + 4 * n).reshape(n, dim).astype(np.float64)
    return Dataset(X, labels, default_splits(labels), c)
