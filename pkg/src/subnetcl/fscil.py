"""Few-shot class-incremental learning with a soft subnetwork.

The base session trains the dense network through a soft mask: the top-c%
weights (by score) enter with mask value 1, the rest with a fresh U(0, 1)
draw every epoch.  Afterwards the soft mask is frozen.  Each few-shot
session fine-tunes only the minor (non-top-c%) weights with a cosine
prototype loss, and classification is nearest-class-mean in feature space.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from ._random import substream
from .errors import (
    ConfigError,
    DegenerateVectorError,
    MissingClassError,
    SessionSpecError,
    TrainingDivergedError,
)
from .masks import make_soft_mask, topc_mask
from .nn import (
    OptimizerState,
    add_head,
    apply_update,
    backward,
    backward_features,
    forward,
    forward_features,
    init_store,
)

BASE_HEAD = 0
_CHUNK = 4096


@dataclass
class FSCILConfig:
    capacity: float = 80.0
    base_epochs: int = 50
    base_lr: float = 1e-3
    base_optimizer: str = "adam"
    batch_size: int = 32
    inc_epochs: int = 6
    inc_lr: float = 0.02
    temperature: float = 1.0
    seed: int = 0
    hidden_sizes: tuple = (64, 64)

    def __post_init__(self):
        if not 0 < self.capacity <= 100:
            raise ConfigError(f"capacity must lie in (0, 100], got {self.capacity}")
        if self.base_epochs < 1 or self.inc_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epoch and batch counts out of range")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def to_dict(self):
        return asdict(self)


@dataclass
class PrototypeStore:
    """Class prototypes (mean features) plus replayed few-shot exemplars."""

    prototypes: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    exemplar_x: list = field(default_factory=list)
    exemplar_y: list = field(default_factory=list)

    @property
    def classes(self):
        return sorted(self.prototypes)

    def matrix(self, classes=None):
        classes = self.classes if classes is None else list(classes)
        return np.array(classes), np.stack([self.prototypes[c] for c in classes])

    def exemplars(self, dim):
        if not self.exemplar_x:
            return np.empty((0, dim)), np.empty(0, dtype=np.int64)
        return np.concatenate(self.exemplar_x), np.concatenate(self.exemplar_y)


def extract_features(store, soft, X):
    X = np.asarray(X, dtype=float)
    return np.concatenate([forward_features(store, soft, X[s : s + _CHUNK])[0] for s in range(0, len(X), _CHUNK)])


def compute_prototypes(store, soft, X, y, classes, into=None):
    """Mean penultimate feature of each class in ``classes``."""
    out = PrototypeStore() if into is None else into
    features = extract_features(store, soft, X)
    y = np.asarray(y)
    for c in classes:
        rows = features[y == c]
        if len(rows) == 0:
            raise MissingClassError(f"class {c} has no samples")
        out.prototypes[int(c)] = rows.mean(axis=0)
        out.counts[int(c)] = len(rows)
    return out


def cosine_distance(u, v):
    """1 - cos(u, v) for nonzero vectors."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVectorError("cosine distance of a zero vector")
    return 1.0 - float(np.dot(u, v)) / (nu * nv)


def _as_matrix(prototypes):
    if isinstance(prototypes, PrototypeStore):
        return prototypes.matrix()
    ids, P = prototypes
    return np.asarray(ids), np.asarray(P, dtype=float)


def prototype_loss_and_grad(features, labels, prototypes, temperature=1.0, reduction="sum"):
    """Cross-entropy over softmax(-cosine_distance / temperature) to every prototype.

    ``prototypes`` is a PrototypeStore or an ``(ids, matrix)`` pair.
    Returns the loss and its gradient w.r.t. ``features``.
    """
    f = np.atleast_2d(np.asarray(features, dtype=float))
    ids, P = _as_matrix(prototypes)
    labels = np.asarray(labels).ravel()
    col = np.searchsorted(ids, labels)
    if (col >= len(ids)).any() or (ids[np.minimum(col, len(ids) - 1)] != labels).any():
        raise MissingClassError("a label has no prototype")
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    pn = np.linalg.norm(P, axis=1)
    if (fn == 0).any() or (pn == 0).any():
        raise DegenerateVectorError("zero-norm feature or prototype")
    cos = (f @ P.T) / (fn * pn)
    z = (cos - 1.0) / temperature
    z_max = z.max(axis=1, keepdims=True)
    log_probs = z - z_max - np.log(np.exp(z - z_max).sum(axis=1, keepdims=True))
    rows = np.arange(len(f))
    per_sample = -log_probs[rows, col]
    dz = np.exp(log_probs)
    dz[rows, col] -= 1.0
    if reduction == "mean":
        loss, dz = per_sample.mean(), dz / len(f)
    elif reduction == "sum":
        loss = per_sample.sum()
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    dcos = dz / temperature
    grad = (dcos @ (P / pn[:, None])) / fn - (dcos * cos).sum(axis=1, keepdims=True) * f / fn**2
    return float(loss), grad


def prototype_loss(features, labels, prototypes, temperature=1.0, reduction="sum"):
    return prototype_loss_and_grad(features, labels, prototypes, temperature, reduction)[0]


def ncm_from_features(features, prototypes):
    """Nearest prototype by Euclidean distance; ties go to the lowest class id."""
    ids, P = _as_matrix(prototypes)
    f = np.atleast_2d(np.asarray(features, dtype=float))
    out = np.empty(len(f), dtype=ids.dtype)
    for s in range(0, len(f), _CHUNK):
        diff = f[s : s + _CHUNK, None, :] - P[None, :, :]
        out[s : s + _CHUNK] = ids[np.argmin((diff * diff).sum(axis=2), axis=1)]
    return out


def ncm_predict(store, soft, prototypes, X):
    return ncm_from_features(extract_features(store, soft, X), prototypes)


def ncm_classify(store, soft, prototypes, sample):
    """Class id for a single sample."""
    sample = np.asarray(sample, dtype=float).reshape(1, -1)
    return int(ncm_predict(store, soft, prototypes, sample)[0])


def _label_index(classes, y):
    classes = np.asarray(sorted(classes))
    return classes, np.searchsorted(classes, y)


def train_base(store, X, y, config, history=None):
    """Base-session training; returns (frozen SoftMask, base head).

    Per epoch a new minor draw is taken around the current top-c% scores.
    Weight gradients are scaled by the soft mask; score gradients are not.
    """
    X = np.asarray(X, dtype=float)
    classes, target = _label_index(np.unique(y), np.asarray(y))
    if len(classes) < 2:
        raise ConfigError("the base session needs at least two classes")
    add_head(store, BASE_HEAD, len(classes))
    opt = OptimizerState(config.base_optimizer, config.base_lr)
    scores = lambda: [layer.score for layer in store.layers]  # noqa: E731
    for epoch in range(config.base_epochs):
        soft = make_soft_mask(topc_mask(scores(), config.capacity), rng=substream(config.seed, "minor-mask", epoch))
        order = substream(config.seed, "base-data", epoch).permutation(len(target))
        losses = []
        for start in range(0, len(target), config.batch_size):
            idx = order[start : start + config.batch_size]
            _, cache = forward(store, soft, BASE_HEAD, X[idx])
            grads = backward(store, soft, BASE_HEAD, cache, target[idx])
            if not np.isfinite(grads.loss):
                raise TrainingDivergedError(f"non-finite base loss in epoch {epoch + 1}", state=store)
            apply_update(store, grads, opt, weight_scale=soft)
            losses.append(grads.loss)
        if history is not None:
            history.append(float(np.mean(losses)))
    major = topc_mask(scores(), config.capacity)
    soft = make_soft_mask(major, rng=substream(config.seed, "minor-mask-final"))
    return soft, store.heads[BASE_HEAD]


def train_incremental(store, soft, session, prototypes, config):
    """Fine-tune the minor weights on one few-shot session, in place.

    Adds prototypes for the session's classes and appends its samples to
    the exemplar set.  Weights on the major support never move.
    """
    new = set(int(c) for c in session.classes)
    overlap = new & set(prototypes.prototypes)
    if overlap:
        raise SessionSpecError(f"session {session.index} reuses classes {sorted(overlap)}")
    Xs, ys = session.train.features, session.train.labels
    compute_prototypes(store, soft, Xs, ys, sorted(new), into=prototypes)
    ex_x, ex_y = prototypes.exemplars(Xs.shape[1])
    X = np.concatenate([Xs, ex_x])
    y = np.concatenate([ys, ex_y])
    minor = soft.minor
    opt = OptimizerState("sgd", config.inc_lr)
    for epoch in range(config.inc_epochs):
        order = substream(config.seed, "session-data", session.index, epoch).permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = order[start : start + config.batch_size]
            features, cache = forward_features(store, soft, X[idx])
            live = np.linalg.norm(features, axis=1) > 0
            if not live.any():
                continue
            _, dfeat = prototype_loss_and_grad(
                features[live], y[idx][live], prototypes, config.temperature, reduction="mean"
            )
            full = np.zeros_like(features)
            full[live] = dfeat
            grads = backward_features(store, soft, cache, full)
            apply_update(
                store,
                grads,
                opt,
                freeze_gate=soft.major,
                weight_scale=minor,
                train_scores=False,
                train_biases=False,
                train_head=False,
            )
    if not store.is_finite():
        raise TrainingDivergedError(f"non-finite parameters after session {session.index}", state=store)
    compute_prototypes(store, soft, Xs, ys, sorted(new), into=prototypes)
    prototypes.exemplar_x.append(Xs.copy())
    prototypes.exemplar_y.append(ys.copy())
    return store, prototypes


@dataclass
class FSCILResult:
    accuracies: list
    base_head_accuracy: float
    soft: object
    prototypes: PrototypeStore
    store: object
    base_accuracies: list = field(default_factory=list)
    novel_accuracies: list = field(default_factory=list)


def run_fscil(sessions, config, store=None):
    """Base session then few-shot sessions; joint NCM accuracy after each."""
    sessions = list(sessions)
    seen = set()
    for s in sessions:
        classes = set(s.classes)
        if classes & seen:
            raise SessionSpecError(f"session {s.index} overlaps earlier classes")
        seen |= classes
    base = sessions[0]
    if store is None:
        store = init_store([base.train.features.shape[1], *config.hidden_sizes], config.seed)
    soft, _ = train_base(store, base.train.features, base.train.labels, config)
    base_classes, target = _label_index(base.classes, base.test.labels)
    logits, _ = forward(store, soft, BASE_HEAD, base.test.features)
    head_acc = float(np.mean(logits.argmax(axis=1) == target))
    prototypes = compute_prototypes(store, soft, base.train.features, base.train.labels, base.classes)
    accs, base_accs, novel_accs = [], [], []
    test_x, test_y = [], []
    for s in sessions:
        if s.index > 1:
            train_incremental(store, soft, s, prototypes, config)
        test_x.append(s.test.features)
        test_y.append(s.test.labels)
        X, y = np.concatenate(test_x), np.concatenate(test_y)
        pred = ncm_predict(store, soft, prototypes, X)
        accs.append(float(np.mean(pred == y)))
        is_base = np.isin(y, base.classes)
        base_accs.append(float(np.mean(pred[is_base] == y[is_base])))
        novel_accs.append(float(np.mean(pred[~is_base] == y[~is_base])) if (~is_base).any() else None)
    return FSCILResult(accs, head_acc, soft, prototypes, store, base_accs, novel_accs)


def session_row(accuracies, reference_last=None):
    """Percent accuracies per session plus the final-session gap to a reference."""
    row = {f"session_{i + 1}": round(100.0 * a, 2) for i, a in enumerate(accuracies)}
    row["gap_vs_reference"] = None if reference_last is None else round(100.0 * accuracies[-1] - reference_last, 2)
    return row
