"""Datasets, loaders and task/session generators.

Every generator is a pure function of its arguments (seed included) and
records a JSON-serializable descriptor from which the stream can be rebuilt
with :func:`stream_from_descriptor`.
"""
import csv
import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from ._random import substream
from .errors import ConfigError, ParseError

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    normalization: dict = field(default_factory=lambda: {"scheme": "none"})

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ConfigError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, labels=None, n_classes=None):
        return Dataset(
            self.features[index],
            self.labels[index] if labels is None else labels,
            self.n_classes if n_classes is None else n_classes,
            dict(self.normalization),
        )


@dataclass
class Task:
    train: Dataset
    test: Dataset

    @property
    def n_classes(self):
        return self.train.n_classes


@dataclass
class TaskStream:
    tasks: list
    descriptor: dict

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


@dataclass
class SessionSpec:
    """One few-shot session: its classes and train/test data (original labels)."""

    index: int
    classes: tuple
    train: Dataset
    test: Dataset
    ways: int = 0
    shots: int = 0


def minmax_normalize(features, lo=None, hi=None):
    """Scale to [0, 1] with a global min/max; returns (scaled, record)."""
    features = np.asarray(features, dtype=float)
    lo = float(features.min()) if lo is None else float(lo)
    hi = float(features.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    return (features - lo) / span, {"scheme": "minmax", "min": lo, "max": hi}


def denormalize(features, record):
    if record.get("scheme", "none") == "none":
        return np.asarray(features, dtype=float)
    span = record["max"] - record["min"]
    span = span if span > 0 else 1.0
    return np.asarray(features, dtype=float) * span + record["min"]


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path):
    """Parse an IDX file (optionally gzipped) into an ndarray."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise ParseError("truncated magic number", offset=len(data))
    zero, dtype_code, ndim = data[0:2], data[2], data[3]
    if zero != b"\x00\x00" or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise ParseError(f"bad IDX magic {data[:4].hex()}", offset=0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise ParseError("truncated dimension header", offset=len(data) - (len(data) - 4) % 4)
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = _IDX_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    body = data[header_end:]
    if len(body) < expected:
        raise ParseError(f"truncated data, expected {expected} bytes", offset=len(data))
    if len(body) > expected:
        raise ParseError("trailing bytes after data", offset=header_end + expected)
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(images_path, labels_path, n_classes=10):
    """MNIST-style image/label IDX pair as a flat Dataset with pixels in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError("label file must be one-dimensional", offset=3)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", offset=4)
    if labels.size and int(labels.max()) >= n_classes:
        raise ConfigError(f"label value {int(labels.max())} out of range for {n_classes} classes")
    features = images.reshape(len(images), -1).astype(float)
    scaled, record = minmax_normalize(features, 0.0, 255.0)
    return Dataset(scaled, labels.astype(np.int64), n_classes, record)


def load_csv(path, label_column="label", n_classes=None):
    """CSV with a header row; every non-label column is a feature."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV file", offset=0) from None
        if label_column not in header:
            raise ParseError(f"no column named {label_column!r}", offset=0)
        li = header.index(label_column)
        rows = [row for row in reader if row]
    try:
        table = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ParseError(f"non-numeric CSV value: {exc}") from None
    if table.ndim != 2 or table.shape[1] != len(header):
        raise ParseError("ragged CSV rows")
    labels = table[:, li].astype(np.int64)
    features = np.delete(table, li, axis=1)
    scaled, record = minmax_normalize(features)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(scaled, labels, n_classes, record)


def holdout_validation(dataset, fraction=0.1, seed=0):
    """Split off ``fraction`` of a dataset as validation data."""
    if not 0 < fraction < 1:
        raise ConfigError("validation fraction must lie in (0, 1)")
    order = substream(seed, "validation").permutation(len(dataset))
    n_val = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def permuted_tasks(train, test, n_tasks, seed):
    """Pixel-permutation tasks; task 1 keeps the original pixel order."""
    if n_tasks < 1:
        raise ConfigError("need at least one task")
    dim = train.features.shape[1]
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(dim) if t == 0 else substream(seed, "permutation", t).permutation(dim)
        tasks.append(
            Task(
                Dataset(train.features[:, perm], train.labels, train.n_classes, dict(train.normalization)),
                Dataset(test.features[:, perm], test.labels, test.n_classes, dict(test.normalization)),
            )
        )
    return TaskStream(tasks, {"kind": "permuted", "n_tasks": n_tasks, "seed": seed})


def task_permutation(dim, task_index, seed):
    """Pixel permutation used for 0-based ``task_index`` by :func:`permuted_tasks`."""
    return np.arange(dim) if task_index == 0 else substream(seed, "permutation", task_index).permutation(dim)


def split_tasks(train, test, classes_per_task, seed=None):
    """Disjoint class groups, labels remapped to 0..classes_per_task-1.

    With ``seed=None`` classes are grouped in ascending order; otherwise the
    class order is shuffled first.
    """
    n = train.n_classes
    if classes_per_task < 1 or n % classes_per_task:
        raise ConfigError(f"{n} classes cannot be split into groups of {classes_per_task}")
    order = np.arange(n) if seed is None else substream(seed, "class-split").permutation(n)
    tasks, groups = [], []
    for g in range(n // classes_per_task):
        group = np.sort(order[g * classes_per_task : (g + 1) * classes_per_task])
        groups.append(group.tolist())
        remap = np.full(n, -1)
        remap[group] = np.arange(classes_per_task)
        parts = []
        for ds in (train, test):
            keep = np.isin(ds.labels, group)
            parts.append(ds.subset(keep, remap[ds.labels[keep]], classes_per_task))
        tasks.append(Task(*parts))
    return TaskStream(tasks, {"kind": "split", "classes_per_task": classes_per_task, "seed": seed, "groups": groups})


def fewshot_sessions(train, test, base_classes, ways, shots, seed, n_sessions=None):
    """Base session plus N-way K-shot sessions over the remaining classes.

    Novel classes are shuffled with the seed and taken ``ways`` at a time;
    each novel session keeps ``shots`` random training samples per class
    and all test samples of its classes.  Labels keep their original ids.
    """
    n_classes = train.n_classes
    if not 0 < base_classes < n_classes + 1:
        raise ConfigError("base class count out of range")
    novel = np.arange(base_classes, n_classes)
    available = len(novel) // ways if ways > 0 else 0
    if n_sessions is None:
        n_sessions = available
    if ways < 1 or shots < 1 or n_sessions > available:
        raise ConfigError(f"{len(novel)} novel classes cannot supply {n_sessions} sessions of {ways} ways")
    rng = substream(seed, "fewshot")
    novel = rng.permutation(novel)
    base = tuple(range(base_classes))
    sessions = [
        SessionSpec(
            1,
            base,
            train.subset(np.isin(train.labels, base)),
            test.subset(np.isin(test.labels, base)),
        )
    ]
    for s in range(n_sessions):
        classes = tuple(sorted(int(c) for c in novel[s * ways : (s + 1) * ways]))
        picks = []
        for c in classes:
            idx = np.flatnonzero(train.labels == c)
            if len(idx) < shots:
                raise ConfigError(f"class {c} has only {len(idx)} training samples")
            picks.append(np.sort(rng.choice(idx, size=shots, replace=False)))
        sessions.append(
            SessionSpec(
                s + 2,
                classes,
                train.subset(np.concatenate(picks)),
                test.subset(np.isin(test.labels, classes)),
                ways,
                shots,
            )
        )
    return sessions


def gaussian_dataset(classes, dim, separation, seed, samples_per_class=100, key=0):
    """Unit-variance clusters around means on a sphere of radius ``separation``.

    Returns stratified (train, test) with an 80/20 split.
    """
    if not separation >= 0:
        raise ConfigError("separation must be non-negative")
    rng = substream(seed, "gaussian", key)
    directions = rng.standard_normal((classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    n_train = int(round(0.8 * samples_per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(classes):
        x = means[c] + rng.standard_normal((samples_per_class, dim))
        tr_x.append(x[:n_train])
        te_x.append(x[n_train:])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(samples_per_class - n_train, c))
    train = Dataset(np.concatenate(tr_x), np.concatenate(tr_y), classes)
    test = Dataset(np.concatenate(te_x), np.concatenate(te_y), classes)
    return train, test


def synth_gaussian_tasks(n_tasks, classes, dim, separation, seed, samples_per_class=100):
    """Independent Gaussian-cluster classification tasks sharing one input space."""
    if separation < 0:
        raise ConfigError("separation must be non-negative")
    tasks = [
        Task(*gaussian_dataset(classes, dim, separation, seed, samples_per_class, key=t)) for t in range(n_tasks)
    ]
    descriptor = {
        "kind": "gaussian",
        "n_tasks": n_tasks,
        "classes": classes,
        "dim": dim,
        "separation": separation,
        "seed": seed,
        "samples_per_class": samples_per_class,
    }
    return TaskStream(tasks, descriptor)


def stream_from_descriptor(descriptor, train=None, test=None):
    """Rebuild a TaskStream; permuted and split streams need the base data."""
    kind = descriptor["kind"]
    if kind == "gaussian":
        return synth_gaussian_tasks(
            descriptor["n_tasks"],
            descriptor["classes"],
            descriptor["dim"],
            descriptor["separation"],
            descriptor["seed"],
            descriptor.get("samples_per_class", 100),
        )
    if train is None or test is None:
        raise ConfigError(f"{kind!r} streams need the base train/test data")
    if kind == "permuted":
        return permuted_tasks(train, test, descriptor["n_tasks"], descriptor["seed"])
    if kind == "split":
        return split_tasks(train, test, descriptor["classes_per_task"], descriptor["seed"])
    raise ConfigError(f"unknown stream kind {kind!r}")
