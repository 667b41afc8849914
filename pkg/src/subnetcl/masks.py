"""Mask construction: top-c% task masks, accumulated unions, soft masks."""
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class TaskMask:
    """Binary per-layer selection for one task at capacity ``capacity`` (%)."""

    layers: list
    capacity: float = 100.0

    @property
    def shapes(self):
        return [m.shape for m in self.layers]

    @property
    def numel(self):
        return sum(m.size for m in self.layers)

    def popcount(self):
        return int(sum(np.count_nonzero(m) for m in self.layers))

    def flat(self):
        return np.concatenate([m.ravel() for m in self.layers])


@dataclass
class AccumMask:
    """Running union of task masks; ``count`` is the number of tasks merged."""

    layers: list
    count: int = 0

    @classmethod
    def zeros(cls, shapes):
        return cls([np.zeros(s, dtype=bool) for s in shapes], 0)

    @property
    def numel(self):
        return sum(m.size for m in self.layers)

    def popcount(self):
        return int(sum(np.count_nonzero(m) for m in self.layers))


@dataclass
class SoftMask:
    """Real-valued mask: entries on ``major`` are exactly 1, the rest lie in [0, 1)."""

    layers: list
    major: list = field(default_factory=list)

    @property
    def minor(self):
        """Mask values off the major support, zero on it."""
        return [np.where(maj, 0.0, v) for v, maj in zip(self.layers, self.major)]

    def major_mask(self, capacity=100.0):
        return TaskMask([m.copy() for m in self.major], capacity)


def layer_quota(capacity, numel):
    """Number of weights kept in a layer of ``numel`` entries: ceil(c% * numel)."""
    c = Fraction(repr(float(capacity)))
    if not 0 < c <= 100:
        raise ConfigError(f"capacity must lie in (0, 100], got {capacity}")
    return math.ceil(c * numel / 100)


def topc_mask(scores, capacity):
    """Keep the ``capacity`` percent highest scores of every layer.

    Selection is per layer; ties go to the lowest flat index.
    """
    layers = []
    for i, s in enumerate(scores):
        s = np.asarray(s)
        if s.size == 0:
            raise ConfigError(f"layer {i} is empty")
        if np.isnan(s).any():
            raise ConfigError(f"layer {i} has NaN scores")
        k = layer_quota(capacity, s.size)
        order = np.argsort(-s.ravel(), kind="stable")
        m = np.zeros(s.size, dtype=bool)
        m[order[:k]] = True
        layers.append(m.reshape(s.shape))
    return TaskMask(layers, float(capacity))


def accumulate(prev, new):
    """Elementwise OR of ``prev`` (AccumMask or None) with a new task mask."""
    if prev is None:
        return AccumMask([np.asarray(m, dtype=bool).copy() for m in new.layers], 1)
    if [m.shape for m in prev.layers] != [np.shape(m) for m in new.layers]:
        raise DimensionError("accumulated and new masks differ in shape")
    return AccumMask([p | np.asarray(m, dtype=bool) for p, m in zip(prev.layers, new.layers)], prev.count + 1)


def make_soft_mask(major, rng=None, minor=None):
    """Soft mask with ``major`` entries at 1 and the rest from U(0, 1).

    Pass ``minor`` (per-layer arrays) instead of ``rng`` to rebuild a soft
    mask around a previously drawn, frozen minor part.
    """
    if (rng is None) == (minor is None):
        raise ConfigError("pass exactly one of rng (resample) or minor (frozen)")
    values, majors = [], []
    for i, m in enumerate(major.layers):
        m = np.asarray(m, dtype=bool)
        if minor is None:
            draw = rng.random(m.shape)
        else:
            draw = np.asarray(minor[i], dtype=float)
            if draw.shape != m.shape:
                raise DimensionError(f"minor layer {i} has shape {draw.shape}, expected {m.shape}")
        values.append(np.where(m, 1.0, draw))
        majors.append(m.copy())
    return SoftMask(values, majors)


def inject_inference_noise(major, eps=1e-3, rng=None):
    """Keep the binary foreground at 1 and fill the background from (0, eps]."""
    if not eps > 0:
        raise ConfigError(f"noise level must be positive, got {eps}")
    if rng is None:
        raise ConfigError("an rng is required")
    values, majors = [], []
    for m in major.layers:
        m = np.asarray(m, dtype=bool)
        background = eps * (1.0 - rng.random(m.shape))
        values.append(np.where(m, 1.0, background))
        majors.append(m.copy())
    return SoftMask(values, majors)


REUSE_CATEGORIES = ("all_used", "per_task", "new_per_task", "reused_per_task", "reused_for_all")


@dataclass
class ReuseReport:
    """Weight-reuse categories at one task index.

    The five category fields are fractions of all masked weights (total and
    per layer).  ``new_ratio`` / ``reused_ratio`` express the same sets as
    fractions of the current task's own selection.
    """

    task: int
    all_used: float
    per_task: float
    new_per_task: float
    reused_per_task: float
    reused_for_all: float
    new_ratio: float
    reused_ratio: float
    layers: list = field(default_factory=list)


def category_sets(masks, t):
    """Per-layer boolean sets for each category at task ``t`` (1-indexed)."""
    if not 1 <= t <= len(masks):
        raise ConfigError(f"task index {t} outside 1..{len(masks)}")
    n_layers = len(masks[0].layers)
    out = []
    for l in range(n_layers):
        current = np.asarray(masks[t - 1].layers[l], dtype=bool)
        prior_union = np.zeros_like(current)
        prior_inter = np.ones_like(current) if t > 1 else np.zeros_like(current)
        for k in range(t - 1):
            m = np.asarray(masks[k].layers[l], dtype=bool)
            prior_union |= m
            prior_inter &= m
        out.append(
            {
                "all_used": prior_union | current,
                "per_task": current,
                "new_per_task": current & ~prior_union,
                "reused_per_task": current & prior_union,
                "reused_for_all": current & prior_inter,
            }
        )
    return out


def mask_stats(masks, upto):
    """Reuse categories at task ``upto``."""
    sets = category_sets(masks, upto)
    totals = dict.fromkeys(REUSE_CATEGORIES, 0)
    layers = []
    numel = 0
    for layer_sets in sets:
        size = layer_sets["per_task"].size
        numel += size
        counts = {k: int(np.count_nonzero(v)) for k, v in layer_sets.items()}
        for k in REUSE_CATEGORIES:
            totals[k] += counts[k]
        layers.append({k: counts[k] / size for k in REUSE_CATEGORIES})
    selected = totals["per_task"]
    return ReuseReport(
        task=upto,
        new_ratio=totals["new_per_task"] / selected if selected else 0.0,
        reused_ratio=totals["reused_per_task"] / selected if selected else 0.0,
        layers=layers,
        **{k: totals[k] / numel for k in REUSE_CATEGORIES},
    )
