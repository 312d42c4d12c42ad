"""Task streams: synthetic class-incremental generator and feature-file IO.

Tasks carry pre-extracted feature vectors, never raw images. The synthetic
generator is the default benchmark: each class is an isotropic unit-variance
Gaussian blob whose mean sits uniformly on a sphere of configurable radius,
with class ids disjoint across tasks.

Two on-disk formats are supported and cross-checked:
  * CSV: header ``task,label,f0,...,f{D-1}``; integer 1-based contiguous
    task ids, integer labels, decimal features. UTF-8, LF.
  * binary: magic ``LRCF``, little-endian u32 version (=1), u32 D, u64 N,
    then N records of (u32 task, u32 label, D x f32 features).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, UsageError
from .rng import RngStream

__all__ = [
    "TaskSplit",
    "Dataset",
    "gen_synthetic_tasks",
    "make_batches",
    "load_features_csv",
    "load_features_bin",
    "write_features_csv",
    "write_features_bin",
]

_MAGIC = b"LRCF"
_HEADER = struct.Struct("<4sIIQ")


@dataclass
class TaskSplit:
    """One task: disjoint class ids with train and test samples."""

    task_id: int
    classes: np.ndarray  # global class ids
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]


@dataclass
class Dataset:
    tasks: list[TaskSplit]
    input_dim: int
    num_classes: int
    provenance: str  # "synthetic" | "file"


def gen_synthetic_tasks(
    rng: RngStream,
    n_tasks: int,
    classes_per_task: int,
    n_train: int,
    n_test: int,
    input_dim: int,
    class_sep: float,
) -> Dataset:
    """Seeded stream of Gaussian-blob tasks.

    Class means are drawn uniformly on the sphere of radius ``class_sep``
    (radius 0 collapses every class onto the origin, which is a useful
    chance-level control), samples add unit isotropic noise.
    """
    if min(n_tasks, classes_per_task, n_train, n_test, input_dim) < 1:
        raise UsageError("all synthetic dataset counts must be positive")
    if class_sep < 0:
        raise DomainError(f"class_sep must be nonnegative, got {class_sep}")
    tasks = []
    cls = 0
    for t in range(1, n_tasks + 1):
        xs_train, ys_train, xs_test, ys_test, classes = [], [], [], [], []
        for _ in range(classes_per_task):
            cstream = rng.spawn(t, cls)
            direction = cstream.normal((1, input_dim))
            norm = float(np.linalg.norm(direction))
            mean = class_sep * direction / norm if norm > 0 else direction * 0.0
            xs_train.append(mean + cstream.normal((n_train, input_dim)))
            xs_test.append(mean + cstream.normal((n_test, input_dim)))
            ys_train.append(np.full(n_train, cls, dtype=np.int64))
            ys_test.append(np.full(n_test, cls, dtype=np.int64))
            classes.append(cls)
            cls += 1
        tasks.append(
            TaskSplit(
                task_id=t,
                classes=np.array(classes, dtype=np.int64),
                train_x=np.concatenate(xs_train),
                train_y=np.concatenate(ys_train),
                test_x=np.concatenate(xs_test),
                test_y=np.concatenate(ys_test),
            )
        )
    return Dataset(tasks=tasks, input_dim=input_dim, num_classes=cls, provenance="synthetic")


def make_batches(split: TaskSplit, batch_size: int, rng: RngStream):
    """Seeded shuffle, then contiguous chunks (last one may be short)."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(split.n_train)
    return [
        (split.train_x[order[s : s + batch_size]], split.train_y[order[s : s + batch_size]])
        for s in range(0, split.n_train, batch_size)
    ]


def _build_dataset(task_ids, labels, features, provenance: str, source: str) -> Dataset:
    """Group rows into TaskSplits, validating the class-incremental contract."""
    uniq = np.unique(task_ids)
    if uniq.size == 0:
        raise ParseError(f"{source}: no samples")
    expected = np.arange(1, uniq.size + 1)
    if not np.array_equal(uniq, expected):
        raise ParseError(
            f"{source}: task ids must be contiguous 1..T, got {uniq.tolist()}"
        )
    owner: dict[int, int] = {}
    tasks = []
    for t in expected:
        sel = task_ids == t
        ys = labels[sel]
        classes = np.unique(ys)
        for c in classes:
            c = int(c)
            if c in owner and owner[c] != t:
                raise ParseError(
                    f"{source}: class {c} appears in tasks {owner[c]} and {t}"
                )
            owner[c] = int(t)
        x = features[sel]
        tasks.append(
            TaskSplit(
                task_id=int(t),
                classes=classes,
                train_x=x,
                train_y=ys,
                test_x=x,
                test_y=ys,
            )
        )
    return Dataset(
        tasks=tasks,
        input_dim=features.shape[1],
        num_classes=len(owner),
        provenance=provenance,
    )


def _merge_test(train: Dataset, test: Dataset, source: str) -> Dataset:
    if len(train.tasks) != len(test.tasks) or train.input_dim != test.input_dim:
        raise ParseError(f"{source}: train and test files disagree on tasks or dimensions")
    tasks = []
    for tr, te in zip(train.tasks, test.tasks):
        if not np.array_equal(tr.classes, te.classes):
            raise ParseError(
                f"{source}: task {tr.task_id} classes differ between train and test"
            )
        tasks.append(
            TaskSplit(
                task_id=tr.task_id,
                classes=tr.classes,
                train_x=tr.train_x,
                train_y=tr.train_y,
                test_x=te.train_x,
                test_y=te.train_y,
            )
        )
    return Dataset(
        tasks=tasks,
        input_dim=train.input_dim,
        num_classes=train.num_classes,
        provenance="file",
    )


def load_features_csv(path: str, test_path: str | None = None) -> Dataset:
    """Parse a CSV feature file; errors carry the offending line number.

    The format has no train/test column: a single file is used for both
    sides, and a second file supplies the test split when given.
    """
    ds = _parse_csv(path)
    if test_path is not None:
        ds = _merge_test(ds, _parse_csv(test_path), f"{path} + {test_path}")
    return ds


def _parse_csv(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if not header:
            raise ParseError(f"{path}:1: empty file")
        cols = header.rstrip("\n").rstrip("\r").split(",")
        if len(cols) < 3 or cols[0] != "task" or cols[1] != "label":
            raise ParseError(f"{path}:1: header must start with 'task,label,f0,...'")
        dim = len(cols) - 2
        for j in range(dim):
            if cols[2 + j] != f"f{j}":
                raise ParseError(f"{path}:1: expected column f{j}, got {cols[2 + j]!r}")
        task_ids, labels, rows = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise ParseError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(parts)}")
            try:
                t = int(parts[0])
                c = int(parts[1])
                feats = [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if t < 1:
                raise ParseError(f"{path}:{lineno}: task ids are 1-based, got {t}")
            if c < 0:
                raise ParseError(f"{path}:{lineno}: labels must be nonnegative, got {c}")
            if not all(np.isfinite(feats)):
                raise ParseError(f"{path}:{lineno}: non-finite feature value")
            task_ids.append(t)
            labels.append(c)
            rows.append(feats)
    if not rows:
        raise ParseError(f"{path}:2: no data rows")
    return _build_dataset(
        np.array(task_ids, dtype=np.int64),
        np.array(labels, dtype=np.int64),
        np.array(rows, dtype=np.float64),
        "file",
        path,
    )


def load_features_bin(path: str, test_path: str | None = None) -> Dataset:
    """Parse a binary feature file; errors carry the failing byte offset."""
    ds = _parse_bin(path)
    if test_path is not None:
        ds = _merge_test(ds, _parse_bin(test_path), f"{path} + {test_path}")
    return ds


def _parse_bin(path: str) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise ParseError(f"{path}: truncated header at byte offset {len(buf)}")
    magic, version, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != 1:
        raise ParseError(f"{path}: unsupported version {version} at byte offset 4")
    if dim == 0:
        raise ParseError(f"{path}: zero feature dimension at byte offset 8")
    record = 8 + 4 * dim
    expected = _HEADER.size + count * record
    if len(buf) != expected:
        offset = min(len(buf), expected)
        raise ParseError(
            f"{path}: payload truncated at byte offset {offset}: "
            f"expected {expected} bytes for {count} records, have {len(buf)}"
        )
    rtype = np.dtype(
        [("task", "<u4"), ("label", "<u4"), ("f", "<f4", (dim,))]
    )
    recs = np.frombuffer(buf, dtype=rtype, offset=_HEADER.size, count=count)
    return _build_dataset(
        recs["task"].astype(np.int64),
        recs["label"].astype(np.int64),
        recs["f"].astype(np.float64).reshape(count, dim),
        "file",
        path,
    )


def write_features_csv(path: str, task_ids, labels, features) -> None:
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task,label," + ",".join(f"f{j}" for j in range(features.shape[1])) + "\n")
        for t, c, row in zip(task_ids, labels, features):
            fh.write(f"{int(t)},{int(c)}," + ",".join(repr(float(v)) for v in row) + "\n")


def write_features_bin(path: str, task_ids, labels, features) -> None:
    features = np.asarray(features, dtype=np.float32)
    n, dim = features.shape
    rtype = np.dtype([("task", "<u4"), ("label", "<u4"), ("f", "<f4", (dim,))])
    recs = np.empty(n, dtype=rtype)
    recs["task"] = np.asarray(task_ids, dtype=np.uint32)
    recs["label"] = np.asarray(labels, dtype=np.uint32)
    recs["f"] = features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, dim, n))
        fh.write(recs.tobytes())
