"""Masked multilayer perceptron with weight scores.

Hidden layers are dense ReLU layers whose weight matrices are multiplied
elementwise by a mask before use.  Every hidden weight has a companion
*score*; masks are derived from scores elsewhere (:mod:`subnetcl.masks`).
Output heads are plain dense layers, one per task, and are never masked.

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
"""
from dataclasses import dataclass, field

import numpy as np

from ._random import substream
from .errors import ConfigError, DimensionError, InvalidCacheError, MissingHeadError


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    score: np.ndarray


@dataclass
class Head:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def n_classes(self):
        return self.weight.shape[1]


@dataclass
class ScoredParamStore:
    """Hidden layers (weights, biases, scores) plus per-task output heads."""

    layers: list
    heads: dict = field(default_factory=dict)
    rng_seed: int = 0
    version: int = 0

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def feature_dim(self):
        return self.layers[-1].weight.shape[1]

    @property
    def weight_shapes(self):
        return [layer.weight.shape for layer in self.layers]

    @property
    def numel(self):
        return sum(layer.weight.size for layer in self.layers)

    def copy(self):
        layers = [DenseLayer(l.weight.copy(), l.bias.copy(), l.score.copy()) for l in self.layers]
        heads = {k: Head(h.weight.copy(), h.bias.copy()) for k, h in self.heads.items()}
        return ScoredParamStore(layers, heads, self.rng_seed, self.version)

    def is_finite(self):
        arrays = [a for l in self.layers for a in (l.weight, l.bias, l.score)]
        arrays += [a for h in self.heads.values() for a in (h.weight, h.bias)]
        return all(np.isfinite(a).all() for a in arrays)


@dataclass
class GradientBundle:
    """Gradients for one backward pass.

    ``effective`` holds dL/d(theta*m) per layer; ``weights`` and ``scores``
    are derived from it by the straight-through rule.
    """

    weights: list
    biases: list
    scores: list
    effective: list
    head_weight: np.ndarray = None
    head_bias: np.ndarray = None
    task: object = None
    loss: float = float("nan")


@dataclass
class ForwardCache:
    inputs: list
    preacts: list
    features: np.ndarray
    logits: np.ndarray
    task: object
    version: int
    mask_key: tuple


@dataclass
class OptimizerState:
    """SGD or Adam state; moments are keyed by parameter name."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def delta(self, name, grad):
        """Return the amount to subtract from parameter ``name``."""
        if self.kind == "sgd":
            return self.lr * grad
        if name not in self.moments:
            self.moments[name] = (np.zeros_like(grad), np.zeros_like(grad))
        m, v = self.moments[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**self.step)
        v_hat = v / (1.0 - self.beta2**self.step)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _kaiming_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_store(layer_sizes, seed):
    """Build a store for ``layer_sizes = [input, hidden1, ..., hiddenK]``.

    Weights are Kaiming-uniform, biases zero, scores U(0, 1).  Identical
    seeds give bit-identical stores.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError("need an input size and at least one hidden layer")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    rng = substream(seed, "init")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weight = _kaiming_uniform(rng, fan_in, fan_out)
        score = rng.random((fan_in, fan_out))
        layers.append(DenseLayer(weight, np.zeros(fan_out), score))
    return ScoredParamStore(layers, {}, int(seed))


def init_head(seed, task, feature_dim, n_classes):
    """Fresh head for ``task``; depends only on ``(seed, task)``."""
    if n_classes < 1:
        raise ConfigError("a head needs at least one class")
    rng = substream(seed, "head", task)
    bound = 1.0 / np.sqrt(feature_dim)
    weight = rng.uniform(-bound, bound, size=(feature_dim, n_classes))
    return Head(weight, np.zeros(n_classes))


def add_head(store, task, n_classes):
    if task not in store.heads:
        store.heads[task] = init_head(store.rng_seed, task, store.feature_dim, n_classes)
    return store.heads[task]


def mask_arrays(store, mask):
    """Normalize a mask argument to a list of arrays (or None for all-ones)."""
    if mask is None:
        return None
    arrays = list(getattr(mask, "layers", mask))
    if len(arrays) != len(store.layers):
        raise DimensionError(f"mask has {len(arrays)} layers, store has {len(store.layers)}")
    for i, (m, layer) in enumerate(zip(arrays, store.layers)):
        if np.shape(m) != layer.weight.shape:
            raise DimensionError(f"mask layer {i} has shape {np.shape(m)}, expected {layer.weight.shape}")
    return arrays


def _mask_key(masks):
    return None if masks is None else tuple(id(m) for m in masks)


def forward_features(store, mask, X):
    """Run the hidden stack; returns penultimate features and a cache."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != store.input_dim:
        raise DimensionError(f"batch shape {X.shape} does not match input dim {store.input_dim}")
    masks = mask_arrays(store, mask)
    inputs, preacts = [], []
    h = X
    for i, layer in enumerate(store.layers):
        w = layer.weight if masks is None else layer.weight * masks[i]
        inputs.append(h)
        z = h @ w + layer.bias
        preacts.append(z)
        h = np.maximum(z, 0.0)
    cache = ForwardCache(inputs, preacts, h, None, None, store.version, _mask_key(masks))
    return h, cache


def forward(store, mask, task, X):
    """Logits of ``task``'s head on ``f(X; theta * mask)``."""
    if task not in store.heads:
        raise MissingHeadError(f"no head for task {task!r}")
    features, cache = forward_features(store, mask, X)
    head = store.heads[task]
    cache.logits = features @ head.weight + head.bias
    cache.task = task
    return cache.logits, cache


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _check_cache(store, masks, cache, task):
    if cache.version != store.version:
        raise InvalidCacheError("store was updated after this forward pass")
    if cache.mask_key != _mask_key(masks):
        raise InvalidCacheError("backward mask differs from the forward mask")
    if cache.task != task:
        raise InvalidCacheError(f"cache belongs to task {cache.task!r}, not {task!r}")


def _backprop_hidden(store, masks, cache, dh):
    n_layers = len(store.layers)
    weights, biases, scores, effective = [None] * n_layers, [None] * n_layers, [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        layer = store.layers[i]
        dz = dh * (cache.preacts[i] > 0)
        g = cache.inputs[i].T @ dz
        effective[i] = g
        biases[i] = dz.sum(axis=0)
        # straight-through: the top-c indicator is treated as identity
        scores[i] = g * layer.weight
        if masks is None:
            weights[i] = g
            w = layer.weight
        else:
            weights[i] = g * masks[i]
            w = layer.weight * masks[i]
        if i:
            dh = dz @ w.T
    return GradientBundle(weights, biases, scores, effective)


def backward(store, mask, task, cache, labels):
    """Softmax cross-entropy gradients through the masked network."""
    masks = mask_arrays(store, mask)
    _check_cache(store, masks, cache, task)
    loss, dlogits = softmax_cross_entropy(cache.logits, labels)
    head = store.heads[task]
    dh = dlogits @ head.weight.T
    grads = _backprop_hidden(store, masks, cache, dh)
    grads.head_weight = cache.features.T @ dlogits
    grads.head_bias = dlogits.sum(axis=0)
    grads.task = task
    grads.loss = float(loss)
    return grads


def backward_features(store, mask, cache, dfeatures):
    """Backpropagate an upstream gradient on the penultimate features."""
    masks = mask_arrays(store, mask)
    if cache.version != store.version or cache.mask_key != _mask_key(masks):
        raise InvalidCacheError("cache does not match store or mask")
    return _backprop_hidden(store, masks, cache, np.asarray(dfeatures, dtype=float))


def _gate_arrays(gate):
    if gate is None:
        return None
    return [np.asarray(g).astype(bool) for g in getattr(gate, "layers", gate)]


def _step(param, grad, name, opt, frozen):
    if frozen is not None:
        grad = np.where(frozen, 0.0, grad)
    delta = opt.delta(name, grad)
    if frozen is not None:
        delta = np.where(frozen, 0.0, delta)
    param -= delta


def apply_update(
    store,
    grads,
    opt,
    freeze_gate=None,
    weight_scale=None,
    score_scale=None,
    train_weights=True,
    train_scores=True,
    train_biases=True,
    train_head=True,
):
    """One optimizer step, in place.

    ``freeze_gate`` marks weights that must not move (entries == 1); their
    gradients are zeroed before reaching the optimizer and their step is
    forced to zero, so they stay bit-identical.  ``weight_scale`` and
    ``score_scale`` multiply the raw gradients elementwise (soft gating).
    """
    frozen = _gate_arrays(freeze_gate)
    if frozen is not None and len(frozen) != len(store.layers):
        raise DimensionError("freeze gate layer count does not match the store")
    opt.step += 1
    for i, layer in enumerate(store.layers):
        if train_weights:
            g = grads.weights[i]
            if weight_scale is not None:
                g = g * getattr(weight_scale, "layers", weight_scale)[i]
            f = None if frozen is None else frozen[i]
            if f is not None and f.shape != layer.weight.shape:
                raise DimensionError(f"freeze gate layer {i} has shape {f.shape}")
            _step(layer.weight, g, f"layer{i}.weight", opt, f)
        if train_scores:
            g = grads.scores[i]
            if score_scale is not None:
                g = g * getattr(score_scale, "layers", score_scale)[i]
            _step(layer.score, g, f"layer{i}.score", opt, None)
        if train_biases:
            _step(layer.bias, grads.biases[i], f"layer{i}.bias", opt, None)
    if train_head and grads.head_weight is not None:
        head = store.heads[grads.task]
        _step(head.weight, grads.head_weight, f"head{grads.task}.weight", opt, None)
        _step(head.bias, grads.head_bias, f"head{grads.task}.bias", opt, None)
    store.version += 1
