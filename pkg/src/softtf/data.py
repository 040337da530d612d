"""Synthetic split-task generation and small dataset readers (IDX, CSV)."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError


@dataclass(frozen=True)
class TaskSequenceSpec:
    seed: int = 0
    n_tasks: int = 5
    classes_per_task: int = 2
    train_per_class: int = 200
    test_per_class: int = 40
    n_tokens: int = 8
    token_dim: int = 4
    sigma_between: float = 1.0
    sigma_within: float = 0.1
    base_classes: int = 8
    base_train_per_class: int = 200
    base_test_per_class: int = 50
    class_ranges: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ContractError("need at least one task and one class per task")
        if self.sigma_within <= 0 or self.sigma_between <= 0:
            raise ContractError("cluster spreads must be positive")
        if self.class_ranges is not None:
            ranges = tuple(tuple(r) for r in self.class_ranges)
            object.__setattr__(self, "class_ranges", ranges)
            if len(ranges) != self.n_tasks:
                raise ContractError(f"{len(ranges)} class ranges for {self.n_tasks} tasks")
            check_class_ranges(ranges)

    @property
    def n_classes_total(self) -> int:
        return max(hi for _, hi in self.ranges())

    def ranges(self) -> tuple[tuple[int, int], ...]:
        """Half-open label range [lo, hi) of every task."""
        if self.class_ranges is not None:
            return self.class_ranges
        c = self.classes_per_task
        return tuple((t * c, (t + 1) * c) for t in range(self.n_tasks))


def check_class_ranges(ranges) -> None:
    prev_hi = 0
    for lo, hi in ranges:
        if hi <= lo:
            raise ContractError(f"empty class range [{lo}, {hi})")
        if lo < prev_hi:
            raise ContractError(f"class range [{lo}, {hi}) overlaps or precedes an earlier task")
        prev_hi = hi


@dataclass
class Dataset:
    x: np.ndarray  # (n, n_tokens, token_dim)
    y: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.y)

    def batches(self, size: int):
        for start in range(0, len(self), size):
            yield self.x[start:start + size], self.y[start:start + size]


@dataclass
class TaskData:
    task_id: int
    class_range: tuple[int, int]
    train: Dataset
    test: Dataset


def _draw(rng, centers, labels, per_class, sigma, shape):
    xs, ys = [], []
    for center, label in zip(centers, labels):
        xs.append(center + rng.normal(0.0, sigma, (per_class, center.size)))
        ys.append(np.full(per_class, label, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return Dataset(x[order].reshape((len(y),) + shape), y[order])


def gen_split_tasks(spec: TaskSequenceSpec) -> tuple[tuple[Dataset, Dataset], list[TaskData]]:
    """Gaussian clusters, one per class, reshaped into feature tokens.

    Returns ``((base_train, base_test), tasks)``.  Base labels live in their
    own space ``0..base_classes-1``; task labels follow ``spec.ranges()``.
    """
    rng = np.random.default_rng(spec.seed)
    dim = spec.n_tokens * spec.token_dim
    shape = (spec.n_tokens, spec.token_dim)
    n_cl = spec.n_classes_total
    centers = rng.normal(0.0, spec.sigma_between, (spec.base_classes + n_cl, dim))
    base_centers, cl_centers = centers[: spec.base_classes], centers[spec.base_classes:]
    base_labels = range(spec.base_classes)
    base_train = _draw(rng, base_centers, base_labels, spec.base_train_per_class, spec.sigma_within, shape)
    base_test = _draw(rng, base_centers, base_labels, spec.base_test_per_class, spec.sigma_within, shape)
    tasks = []
    for t, (lo, hi) in enumerate(spec.ranges()):
        labels = range(lo, hi)
        tr = _draw(rng, cl_centers[lo:hi], labels, spec.train_per_class, spec.sigma_within, shape)
        te = _draw(rng, cl_centers[lo:hi], labels, spec.test_per_class, spec.sigma_within, shape)
        tasks.append(TaskData(t, (lo, hi), tr, te))
    return (base_train, base_test), tasks


# ---------------------------------------------------------------------------
# file readers
# ---------------------------------------------------------------------------

_IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def read_idx(path) -> np.ndarray:
    """Raw array stored in an MNIST-style IDX file (big-endian header)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError("IDX magic must start with two zero bytes", 0)
    if raw[2] not in _IDX_TYPES:
        raise ParseError(f"unknown IDX element type 0x{raw[2]:02x}", 2)
    dtype, width = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64)) * width
    if len(raw) != expected:
        raise ParseError(f"IDX payload size mismatch: expected {expected} bytes, got {len(raw)}", min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def _normalize(x: np.ndarray, integer_bytes: bool = False) -> np.ndarray:
    x = x.astype(np.float64)
    if integer_bytes:
        return x / 255.0
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def remap_labels(y: np.ndarray) -> np.ndarray:
    """Map labels onto 0..k-1 preserving sorted order."""
    _, inverse = np.unique(y, return_inverse=True)
    return inverse.astype(np.int64)


def to_tokens(features: np.ndarray, n_tokens: int) -> np.ndarray:
    """Reshape flat features (n, F) into (n, n_tokens, ceil(F/n_tokens)), zero-padding the tail."""
    n, f = features.shape
    width = -(-f // n_tokens)
    padded = np.zeros((n, n_tokens * width))
    padded[:, :f] = features
    return padded.reshape(n, n_tokens, width)


def load_idx(images_path, labels_path, n_tokens: int = 8) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or len(labels) != len(images):
        raise ParseError(f"label file holds {labels.shape}, images {images.shape}", 4)
    feats = _normalize(images.reshape(len(images), -1), integer_bytes=images.dtype == np.uint8)
    return Dataset(to_tokens(feats, n_tokens), remap_labels(labels))


def load_csv(path, n_tokens: int = 8) -> Dataset:
    """CSV with header ``label,f0,f1,...``; features min-max scaled to [0, 1]."""
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV file", 0) from None
    expected = ["label"] + [f"f{i}" for i in range(len(header) - 1)]
    if len(header) < 2 or [h.strip() for h in header] != expected:
        raise ParseError(f"CSV header must be 'label,f0,f1,...', got {','.join(header)!r}", 0)
    rows, labels = [], []
    offset = len(text.splitlines(keepends=True)[0].encode())
    for line_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ParseError(f"line {line_no} has {len(row)} fields, expected {len(header)}", offset)
        try:
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
        except ValueError:
            raise ParseError(f"non-numeric value on line {line_no}", offset) from None
        offset += len((",".join(row) + "\n").encode())
    if not rows:
        raise ParseError("CSV has a header but no rows", offset)
    feats = _normalize(np.array(rows))
    return Dataset(to_tokens(feats, n_tokens), remap_labels(np.array(labels)))
