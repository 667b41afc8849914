import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subnetcl._random import substream
from subnetcl.errors import ConfigError
from subnetcl.masks import (
    AccumMask,
    TaskMask,
    accumulate,
    inject_inference_noise,
    layer_quota,
    make_soft_mask,
    mask_stats,
    topc_mask,
)


def sort_oracle(scores, c):
    """Full sort by (-score, index), keep the first ceil(c% * n)."""
    flat = np.asarray(scores).ravel().tolist()
    k = math.ceil(c * len(flat) / 100 - 1e-9)
    keep = sorted(range(len(flat)), key=lambda i: (-flat[i], i))[:k]
    out = np.zeros(len(flat), dtype=bool)
    out[keep] = True
    return out.reshape(np.shape(scores))


def tm(*rows):
    return [TaskMask([np.array(r, dtype=bool)]) for r in rows]


def test_topc_examples():
    assert topc_mask([np.array([0.9, 0.1, 0.5, 0.7])], 50).layers[0].tolist() == [1, 0, 0, 1]
    assert topc_mask([np.random.default_rng(0).random((3, 4))], 100).layers[0].all()
    assert topc_mask([np.full(4, 0.3)], 50).layers[0].tolist() == [1, 1, 0, 0]


@pytest.mark.parametrize("c", [1, 3, 5, 10, 30, 50, 70, 100])
def test_topc_matches_sort_oracle(c):
    rng = np.random.default_rng(c)
    for shape in [(100, 100), (7, 13), (1, 1), (3,)]:
        # coarse rounding forces many ties
        s = np.round(rng.random(shape), 2)
        got = topc_mask([s], c).layers[0]
        assert np.array_equal(got, sort_oracle(s, c))
        assert got.sum() == math.ceil(c * s.size / 100 - 1e-9)


def test_topc_is_per_layer():
    s = [np.array([10.0, 9.0]), np.array([0.1, 0.2, 0.3, 0.4])]
    m = topc_mask(s, 50)
    assert m.layers[0].tolist() == [1, 0] and m.layers[1].tolist() == [0, 0, 1, 1]


def test_layer_quota_uses_exact_arithmetic():
    # 0.07 * 100 / 100 is 7.000000000000001 in floats; exact ceil is 7
    assert layer_quota(7, 100) == 7
    assert layer_quota(0.1, 10) == 1
    assert layer_quota(30, 1) == 1
    with pytest.raises(ConfigError):
        layer_quota(0, 10)
    with pytest.raises(ConfigError):
        layer_quota(100.5, 10)


def test_topc_rejects_empty_layer():
    with pytest.raises(ConfigError):
        topc_mask([np.zeros((0, 3))], 50)


def test_accumulate_examples():
    a = accumulate(None, tm([1, 0, 0])[0])
    b = accumulate(a, tm([0, 0, 1])[0])
    assert b.layers[0].tolist() == [1, 0, 1] and b.count == 2
    x = tm([1, 0, 1, 1])[0]
    zero = AccumMask.zeros([(4,)])
    assert accumulate(zero, x).layers[0].tolist() == x.layers[0].tolist()
    once = accumulate(None, x)
    assert accumulate(once, x).layers[0].tolist() == once.layers[0].tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_accumulate_monotone_and_bounded(seed, T):
    rng = np.random.default_rng(seed)
    acc = AccumMask.zeros([(6, 5), (4,)])
    prev = 0
    union = [np.zeros((6, 5), bool), np.zeros(4, bool)]
    for _ in range(T):
        m = TaskMask([rng.random((6, 5)) < 0.3, rng.random(4) < 0.3])
        acc = accumulate(acc, m)
        union = [u | l for u, l in zip(union, m.layers)]
        assert prev <= acc.popcount() <= acc.numel
        prev = acc.popcount()
    assert all(np.array_equal(a, u) for a, u in zip(acc.layers, union))


def test_soft_mask_examples():
    ones = TaskMask([np.ones((3, 3), dtype=bool)])
    assert np.all(make_soft_mask(ones, rng=substream(0, "minor-mask")).layers[0] == 1.0)
    major = topc_mask([np.random.default_rng(1).random((20, 10))], 30)
    a = make_soft_mask(major, rng=substream(4, "minor-mask", 0))
    b = make_soft_mask(major, rng=substream(4, "minor-mask", 0))
    assert np.array_equal(a.layers[0], b.layers[0])
    assert np.all(a.layers[0][major.layers[0]] == 1.0)
    minor = a.layers[0][~major.layers[0]]
    assert minor.min() >= 0 and minor.max() < 1
    assert np.count_nonzero(a.layers[0] == 1.0) == major.popcount()
    frozen = make_soft_mask(major, minor=a.minor)
    assert np.array_equal(frozen.layers[0], a.layers[0])


def test_soft_mask_needs_one_source():
    major = TaskMask([np.ones(3, dtype=bool)])
    with pytest.raises(ConfigError):
        make_soft_mask(major)


@pytest.mark.parametrize("eps", [1e-3, 1e-6, 0.5])
def test_inference_noise_bounds(eps):
    major = topc_mask([np.random.default_rng(2).random((30, 30))], 30)
    soft = inject_inference_noise(major, eps, substream(0, "probe"))
    bg = soft.layers[0][~major.layers[0]]
    assert bg.min() > 0 and bg.max() <= eps
    assert np.count_nonzero(soft.layers[0] == 1.0) == major.popcount()
    assert np.abs(soft.layers[0] - major.layers[0]).max() <= eps


def test_inference_noise_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        inject_inference_noise(TaskMask([np.ones(2, bool)]), 0.0, substream(0, "probe"))


def test_mask_stats_hand_example():
    masks = tm([1, 1, 0, 0], [0, 1, 1, 0])
    r = mask_stats(masks, 2)
    assert r.reused_ratio == 0.5 and r.new_ratio == 0.5
    assert r.all_used == 0.75
    assert r.reused_per_task == 0.25 and r.new_per_task == 0.25


def test_mask_stats_identical_masks():
    masks = tm([1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0])
    for t in (2, 3):
        r = mask_stats(masks, t)
        assert r.reused_ratio == 1.0 and r.reused_for_all == 0.5 and r.new_per_task == 0.0


def test_mask_stats_disjoint_masks():
    masks = tm([1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1])
    for t in (2, 3):
        r = mask_stats(masks, t)
        assert r.reused_per_task == 0.0
        assert r.new_per_task == pytest.approx(1 / 3) and r.new_ratio == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([10, 30, 50]))
def test_new_plus_reused_is_capacity(seed, c):
    rng = np.random.default_rng(seed)
    masks = [topc_mask([rng.random((12, 9)), rng.random((9, 4))], c) for _ in range(4)]
    numel = 12 * 9 + 9 * 4
    quota = layer_quota(c, 108) + layer_quota(c, 36)
    acc = None
    for t in range(1, 5):
        acc = accumulate(acc, masks[t - 1])
        r = mask_stats(masks, t)
        assert r.new_per_task + r.reused_per_task == pytest.approx(quota / numel, abs=1e-15)
        assert r.new_ratio + r.reused_ratio == pytest.approx(1.0)
        assert r.all_used == acc.popcount() / numel
        assert r.reused_for_all <= r.reused_per_task
