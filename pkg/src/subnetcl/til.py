"""Task-incremental training with per-task winning subnetworks.

For each task the hidden weights are selected by the top-c% of the shared
score tensor.  Weights already claimed by an earlier task are frozen, so
every earlier task keeps its exact accuracy.
"""
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ._random import substream
from .codec import capacity
from .errors import ConfigError, IncompleteMatrixError, TrainingDivergedError
from .masks import AccumMask, TaskMask, accumulate, inject_inference_noise, topc_mask
from .nn import OptimizerState, ScoredParamStore, add_head, apply_update, backward, forward, init_head, init_store

MODES = ("wsn", "softnet")
_EVAL_CHUNK = 4096


@dataclass
class TILRunConfig:
    capacity: float = 30.0
    epochs: int = 5
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    mode: str = "wsn"
    inference_eps: float = 1e-3
    hidden_sizes: tuple = (64, 64)

    def __post_init__(self):
        if not 0 < self.capacity <= 100:
            raise ConfigError(f"capacity must lie in (0, 100], got {self.capacity}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.inference_eps > 0:
            raise ConfigError("inference noise level must be positive")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def to_dict(self):
        return asdict(self)


@dataclass
class AccuracyMatrix:
    """``entries[(j, i)]``: accuracy on task i after training task j (1-indexed).

    ``random[i]`` is the accuracy of an untrained network on task i.
    """

    entries: dict = field(default_factory=dict)
    random: dict = field(default_factory=dict)

    def __getitem__(self, key):
        try:
            return self.entries[key]
        except KeyError:
            raise IncompleteMatrixError(f"accuracy entry {key} is missing") from None

    def __setitem__(self, key, value):
        self.entries[key] = float(value)

    def __contains__(self, key):
        return key in self.entries

    @classmethod
    def from_array(cls, A, R=None):
        """Build from a square array with ``A[j-1, i-1]``; NaN marks missing.

        ``R`` is a sequence (task 1 first) or a ``{task: accuracy}`` map.
        """
        A = np.asarray(A, dtype=float)
        entries = {(j + 1, i + 1): float(A[j, i]) for j in range(A.shape[0]) for i in range(A.shape[1]) if not np.isnan(A[j, i])}
        if R is None:
            R = {}
        elif not isinstance(R, dict):
            R = {i + 1: r for i, r in enumerate(R)}
        random = {int(i): float(r) for i, r in R.items() if not np.isnan(r)}
        return cls(entries, random)

    def to_array(self, T):
        out = np.full((T, T), np.nan)
        for (j, i), v in self.entries.items():
            if j <= T and i <= T:
                out[j - 1, i - 1] = v
        return out


def metric_acc(A, T):
    """Mean final accuracy over tasks 1..T."""
    return sum(A[T, i] for i in range(1, T + 1)) / T


def metric_bwt(A, T):
    """Mean change of each earlier task's accuracy from right-after-training to the end."""
    if T < 2:
        return 0.0
    return sum(A[T, i] - A[i, i] for i in range(1, T)) / (T - 1)


def metric_fwt(A, R, T, average="tasks"):
    """Sum over i = 2..T of (A[i-1, i] - R[i]); None when T < 2.

    ``average="tasks"`` divides by T, ``average="probes"`` by the T - 1 terms.
    """
    if average not in ("tasks", "probes"):
        raise ConfigError(f"unknown FWT averaging {average!r}")
    if T < 2:
        return None
    total = 0.0
    for i in range(2, T + 1):
        if i not in R:
            raise IncompleteMatrixError(f"random-init accuracy for task {i} is missing")
        total += A[i - 1, i] - R[i]
    return total / (T if average == "tasks" else T - 1)


def evaluate(store, mask, task, X, y):
    """Fraction of argmax predictions equal to ``y``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(y) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    correct = 0
    for start in range(0, len(y), _EVAL_CHUNK):
        logits, _ = forward(store, mask, task, X[start : start + _EVAL_CHUNK])
        correct += int(np.count_nonzero(logits.argmax(axis=1) == y[start : start + _EVAL_CHUNK]))
    return correct / len(y)


def _scores(store):
    return [layer.score for layer in store.layers]


def train_task(store, accum, task_id, task, config, history=None):
    """Train task ``task_id`` in place and return its final mask.

    The mask is recomputed from the live scores before every batch.  Weights
    inside ``accum`` (the union of earlier masks) never move; hidden biases
    only train on the first task.  Epoch-mean losses are appended to
    ``history`` when a list is given.
    """
    X, y = task.train.features, task.train.labels
    if len(y) == 0:
        raise ConfigError(f"task {task_id} has no training data")
    if accum is None:
        accum = AccumMask.zeros(store.weight_shapes)
    first = accum.count == 0
    add_head(store, task_id, task.n_classes)
    opt = OptimizerState(config.optimizer, config.lr)
    for epoch in range(config.epochs):
        order = substream(config.seed, "data", task_id, epoch).permutation(len(y))
        losses = []
        for start in range(0, len(y), config.batch_size):
            idx = order[start : start + config.batch_size]
            mask = topc_mask(_scores(store), config.capacity)
            _, cache = forward(store, mask, task_id, X[idx])
            grads = backward(store, mask, task_id, cache, y[idx])
            if not np.isfinite(grads.loss):
                raise TrainingDivergedError(f"non-finite loss on task {task_id}, epoch {epoch + 1}", state=store)
            apply_update(store, grads, opt, freeze_gate=None if first else accum, train_biases=first)
            losses.append(grads.loss)
        if history is not None:
            history.append(float(np.mean(losses)))
    if not store.is_finite():
        raise TrainingDivergedError(f"non-finite parameters after task {task_id}", state=store)
    return topc_mask(_scores(store), config.capacity)


def probe_future(store, accum, task_id, task, config):
    """Accuracy on a not-yet-trained task through the union mask and a fresh head."""
    head = init_head(store.rng_seed, task_id, store.feature_dim, task.n_classes)
    probe = ScoredParamStore(store.layers, {task_id: head}, store.rng_seed, store.version)
    if config.mode == "softnet":
        rng = substream(config.seed, "probe", task_id)
        mask = inject_inference_noise(TaskMask(accum.layers), config.inference_eps, rng)
    else:
        mask = accum
    return evaluate(probe, mask, task_id, task.test.features, task.test.labels)


def random_baseline(layer_sizes, task_id, task, seed):
    """Accuracy of a freshly initialized dense network (all-ones mask)."""
    child = int(substream(seed, "random-baseline", task_id).integers(2**62))
    fresh = init_store(layer_sizes, child)
    add_head(fresh, task_id, task.n_classes)
    return evaluate(fresh, None, task_id, task.test.features, task.test.labels)


@dataclass
class RunResult:
    accuracy: AccuracyMatrix
    masks: list
    accum: AccumMask
    capacity: object
    metrics: dict
    store: ScoredParamStore
    timings: list = field(default_factory=list)
    capacity_curve: list = field(default_factory=list)
    histories: list = field(default_factory=list)
    partial: bool = False


def _metrics(A, T, capacity_report):
    out = {"ACC": metric_acc(A, T), "BWT": metric_bwt(A, T)}
    fwt = metric_fwt(A, A.random, T)
    if fwt is not None:
        out["FWT"] = fwt
    if capacity_report is not None:
        out["CAP"] = capacity_report.cap_formula
    return out


def run_sequence(tasks, config, store=None):
    """Train every task in order, filling the accuracy matrix as it goes."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("need at least one task")
    layer_sizes = [tasks[0].train.features.shape[1], *config.hidden_sizes]
    if store is None:
        store = init_store(layer_sizes, config.seed)
    A = AccuracyMatrix()
    accum = AccumMask.zeros(store.weight_shapes)
    masks, timings, curve, histories = [], [], [], []
    for j, task in enumerate(tasks, start=1):
        if j > 1:
            A[j - 1, j] = probe_future(store, accum, j, task, config)
            A.random[j] = random_baseline(layer_sizes, j, task, config.seed)
        history = []
        start = time.perf_counter()
        try:
            mask = train_task(store, accum, j, task, config, history)
        except TrainingDivergedError as exc:
            exc.partial = RunResult(A, masks, accum, None, {}, store, timings, curve, histories, partial=True)
            raise
        timings.append(time.perf_counter() - start)
        histories.append(history)
        masks.append(mask)
        accum = accumulate(accum, mask)
        for i in range(1, j + 1):
            A[j, i] = evaluate(store, masks[i - 1], i, tasks[i - 1].test.features, tasks[i - 1].test.labels)
        curve.append(capacity(masks))
    T = len(tasks)
    report = curve[-1]
    return RunResult(A, masks, accum, report, _metrics(A, T, report), store, timings, curve, histories)
