"""Post-hoc diagnostics over trained stores and task masks."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ._random import substream
from .errors import ConfigError, DimensionError
from .masks import TaskMask, category_sets
from .nn import backward, forward, mask_arrays
from .til import evaluate

ABLATION_CATEGORIES = ("none", "reused_per_task", "reused_for_all", "new_per_task")


@dataclass
class CorrelationMatrix:
    values: np.ndarray
    metric: str = "jaccard"


def mask_correlation(masks):
    """Jaccard overlap |a & b| / |a | b| between every pair of task masks."""
    if not masks:
        raise ConfigError("need at least one mask")
    shapes = masks[0].shapes
    flats = []
    for m in masks:
        if m.shapes != shapes:
            raise DimensionError("masks differ in shape")
        flats.append(m.flat().astype(bool))
    T = len(flats)
    out = np.eye(T)
    for i in range(T):
        for j in range(i + 1, T):
            union = np.count_nonzero(flats[i] | flats[j])
            inter = np.count_nonzero(flats[i] & flats[j])
            out[i, j] = out[j, i] = inter / union if union else 0.0
    return CorrelationMatrix(out)


def ablated_mask(masks, t, category, layers=None):
    """Copy of mask ``t`` (1-indexed) with a reuse category switched off."""
    if category not in ABLATION_CATEGORIES:
        raise ConfigError(f"unknown ablation category {category!r}")
    base = masks[t - 1]
    if category == "none":
        return TaskMask([np.asarray(m).copy() for m in base.layers], base.capacity)
    sets = category_sets(masks, t)
    out = []
    for l, m in enumerate(base.layers):
        m = np.asarray(m, dtype=bool).copy()
        if layers is None or l in layers:
            m &= ~sets[l][category]
        out.append(m)
    return TaskMask(out, base.capacity)


def ablate_reused(store, masks, t, category, X, y, layers=None):
    """Accuracy of task ``t`` after removing one category of weights from its mask."""
    return evaluate(store, ablated_mask(masks, t, category, layers), t, X, y)


@dataclass
class SmoothnessProbe:
    """Per perturbation pair: gradient-difference norm over parameter-difference norm."""

    rows: list = field(default_factory=list)
    capacity: float = None
    seed: int = 0
    skipped: int = 0

    def summary(self):
        by_scale = {}
        for r in self.rows:
            by_scale.setdefault(r["scale"], []).append(r)
        return {
            s: {
                "masked_mean": float(np.mean([r["masked_ratio"] for r in rs])),
                "dense_mean": float(np.mean([r["dense_ratio"] for r in rs])),
            }
            for s, rs in sorted(by_scale.items())
        }


def network_gradient(store, task, X, y):
    """Gradient function of the cross-entropy w.r.t. the effective hidden weights."""

    def grad(effective):
        probe = store.copy()
        for layer, w in zip(probe.layers, effective):
            layer.weight = np.array(w, dtype=float)
        _, cache = forward(probe, None, task, X)
        return backward(probe, None, task, cache, y).effective

    return grad


def _ratio(grad_fn, theta, theta2, mask):
    eff = [t * m for t, m in zip(theta, mask)]
    eff2 = [t * m for t, m in zip(theta2, mask)]
    num = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(grad_fn(eff), grad_fn(eff2))))
    den = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(eff, eff2)))
    return None if den == 0 else float(num / den)


def lipschitz_probe(store, mask, scales, pairs, seed, task=None, X=None, y=None, grad_fn=None):
    """Empirical gradient Lipschitz ratios for masked and dense weights.

    For each scale and pair, theta' = theta + scale * u with u a random unit
    direction; the ratio is ||g(theta*m) - g(theta'*m)|| / ||(theta - theta')*m||
    where g is ``grad_fn`` (default: cross-entropy gradient on ``X, y``).
    The dense ratio uses m = 1.  Pairs with a zero masked denominator are
    skipped and counted.
    """
    if any(not s > 0 for s in scales):
        raise ConfigError("perturbation scales must be positive")
    if grad_fn is None:
        if X is None or y is None or task is None:
            raise ConfigError("need task data or an explicit gradient function")
        grad_fn = network_gradient(store, task, np.asarray(X, dtype=float), np.asarray(y))
    masks = mask_arrays(store, mask)
    if masks is None:
        masks = [np.ones_like(l.weight) for l in store.layers]
    masks = [np.asarray(m, dtype=float) for m in masks]
    ones = [np.ones_like(m) for m in masks]
    theta = [l.weight for l in store.layers]
    rng = substream(seed, "probes")
    probe = SmoothnessProbe(capacity=getattr(mask, "capacity", None), seed=seed)
    for scale in scales:
        for p in range(pairs):
            u = [rng.standard_normal(t.shape) for t in theta]
            norm = np.sqrt(sum(np.sum(v * v) for v in u))
            theta2 = [t + scale * v / norm for t, v in zip(theta, u)]
            masked = _ratio(grad_fn, theta, theta2, masks)
            if masked is None:
                probe.skipped += 1
                continue
            dense = _ratio(grad_fn, theta, theta2, ones)
            probe.rows.append({"scale": float(scale), "pair": p, "masked_ratio": masked, "dense_ratio": dense})
    return probe


def matrix_csv(values, labels=None):
    """CSV text for a square matrix with a header row and a label column."""
    values = np.asarray(values)
    labels = labels or [str(i + 1) for i in range(values.shape[0])]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", *labels])
    for lab, row in zip(labels, values):
        writer.writerow([lab, *(f"{v:.6f}" for v in row)])
    return buf.getvalue()
