import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, make_store, rel_error
from subnetcl.errors import ConfigError, DimensionError, InvalidCacheError, MissingHeadError
from subnetcl.masks import TaskMask, topc_mask
from subnetcl.nn import (
    GradientBundle,
    Head,
    OptimizerState,
    apply_update,
    backward,
    forward,
    init_store,
    softmax_cross_entropy,
)


def test_identity_mask_single_weight():
    store = make_store([[[2.0]]])
    logits, _ = forward(store, [np.ones((1, 1))], 1, np.array([[1.0]]))
    assert logits[0, 0] == 2.0


def test_zero_mask_leaves_bias():
    store = make_store([[[3.0, -1.0], [2.0, 4.0]]], biases=[[0.5, 0.5]])
    X = np.array([[1.7, -2.3], [0.1, 9.0]])
    logits, _ = forward(store, [np.zeros((2, 2))], 1, X)
    assert np.all(logits == 0.5)


def test_masked_preactivation():
    # stored (in, out): output unit j uses column j, so theta[j][k] -> weight[k, j]
    theta = np.array([[1.0, 2.0], [3.0, 4.0]])
    m = np.array([[1, 0], [0, 1]])
    store = make_store([theta.T])
    _, cache = forward(store, [m.T], 1, np.array([[1.0, 1.0]]))
    assert cache.preacts[0].tolist() == [[1.0, 4.0]]


def test_forward_errors(small_store):
    with pytest.raises(DimensionError):
        forward(small_store, None, 1, np.ones((2, 4)))
    with pytest.raises(MissingHeadError):
        forward(small_store, None, 99, np.ones((2, 5)))
    with pytest.raises(DimensionError):
        forward(small_store, [np.ones((5, 7))], 1, np.ones((2, 5)))


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 6)) for _ in range(3)]
    store = init_store(sizes, seed)
    n_cls = int(rng.integers(2, 5))
    store.heads[1] = Head(rng.normal(size=(sizes[-1], n_cls)), rng.normal(size=n_cls))
    for layer in store.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    mask = topc_mask([rng.random(l.weight.shape) for l in store.layers], 60)
    X = rng.normal(size=(4, sizes[0]))
    y = rng.integers(0, n_cls, size=4)
    return store, mask, X, y


def _loss(store, mask, X, y):
    logits, _ = forward(store, mask, 1, X)
    return softmax_cross_entropy(logits, y)[0]


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    store, mask, X, y = _random_instance(seed)
    _, cache = forward(store, mask, 1, X)
    grads = backward(store, mask, 1, cache, y)
    for i, layer in enumerate(store.layers):
        m = mask.layers[i]
        num = central_difference(lambda: _loss(store, mask, X, y), layer.weight)
        # masked coordinates have an exactly zero derivative
        assert rel_error(grads.weights[i], num) < 1e-5
        assert np.all(grads.weights[i][~m] == 0)
        num_b = central_difference(lambda: _loss(store, mask, X, y), layer.bias)
        assert rel_error(grads.biases[i], num_b) < 1e-5
    head = store.heads[1]
    assert rel_error(grads.head_weight, central_difference(lambda: _loss(store, mask, X, y), head.weight)) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_score_gradient_is_straight_through(seed):
    store, mask, X, y = _random_instance(seed)
    _, cache = forward(store, mask, 1, X)
    grads = backward(store, mask, 1, cache, y)
    for i, layer in enumerate(store.layers):
        assert np.array_equal(grads.scores[i], grads.effective[i] * layer.weight)
        assert np.array_equal(grads.weights[i], grads.effective[i] * mask.layers[i])


def test_stale_cache_rejected(small_store):
    X, y = np.ones((2, 5)), np.array([0, 1])
    _, cache = forward(small_store, None, 1, X)
    grads = backward(small_store, None, 1, cache, y)
    apply_update(small_store, grads, OptimizerState("sgd", 0.1))
    with pytest.raises(InvalidCacheError):
        backward(small_store, None, 1, cache, y)


def _unit_grads(store, value=1.0):
    shapes = store.weight_shapes
    return GradientBundle(
        weights=[np.full(s, value) for s in shapes],
        biases=[np.zeros(s[1]) for s in shapes],
        scores=[np.zeros(s) for s in shapes],
        effective=[np.full(s, value) for s in shapes],
    )


def test_full_gate_freezes_weights():
    store = init_store([4, 3, 2], 1)
    before = [l.weight.copy() for l in store.layers]
    opt = OptimizerState("adam", 0.1)
    gate = [np.ones(s, dtype=bool) for s in store.weight_shapes]
    for _ in range(10):
        apply_update(store, _unit_grads(store), opt, freeze_gate=gate)
    assert all(np.array_equal(a, l.weight) for a, l in zip(before, store.layers))


def test_open_gate_sgd_step():
    store = init_store([3, 2], 1)
    store.layers[0].weight[:] = 0.0
    gate = [np.zeros((3, 2), dtype=bool)]
    apply_update(store, _unit_grads(store), OptimizerState("sgd", 0.1), freeze_gate=gate)
    assert np.all(store.layers[0].weight == -0.1)


def test_adam_moments_stay_zero_on_frozen_coordinate():
    store = init_store([3, 2], 1)
    gate = np.zeros((3, 2), dtype=bool)
    gate[1, 0] = True
    opt = OptimizerState("adam", 1e-2)
    frozen_value = store.layers[0].weight[1, 0]
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = _unit_grads(store)
        g.weights[0] = rng.normal(size=(3, 2))
        apply_update(store, g, opt, freeze_gate=[gate])
    m, v = opt.moments["layer0.weight"]
    assert m[1, 0] == 0.0 and v[1, 0] == 0.0
    assert store.layers[0].weight[1, 0] == frozen_value
    assert opt.step == 100


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30))
def test_freeze_is_exact_for_any_gate(seed, steps):
    rng = np.random.default_rng(seed)
    store = init_store([4, 5, 3], seed)
    gate = [rng.random(s) < 0.5 for s in store.weight_shapes]
    before = [l.weight[g].copy() for l, g in zip(store.layers, gate)]
    opt = OptimizerState("adam", 0.05)
    for _ in range(steps):
        g = _unit_grads(store)
        g.weights = [rng.normal(size=s) for s in store.weight_shapes]
        apply_update(store, g, opt, freeze_gate=gate)
        assert store.is_finite()
    for b, l, gt in zip(before, store.layers, gate):
        assert np.array_equal(b, l.weight[gt])


def test_init_is_deterministic():
    a, b = init_store([8, 6, 4], 11), init_store([8, 6, 4], 11)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight) and np.array_equal(la.score, lb.score)
    c = init_store([8, 6, 4], 12)
    assert any(not np.array_equal(la.weight, lc.weight) for la, lc in zip(a.layers, c.layers))


@pytest.mark.parametrize("seed", range(10))
def test_scores_in_unit_interval_and_shapes(seed):
    store = init_store([10, 20, 5], seed)
    for layer in store.layers:
        assert layer.score.shape == layer.weight.shape
        assert layer.score.min() >= 0 and layer.score.max() < 1
        bound = np.sqrt(6 / layer.weight.shape[0])
        assert np.abs(layer.weight).max() <= bound


def test_init_rejects_zero_layer():
    with pytest.raises(ConfigError):
        init_store([4, 0, 2], 0)


def test_training_is_deterministic():
    def run():
        store = init_store([4, 8, 4], 5)
        store.heads[1] = Head(np.ones((4, 2)) * 0.1, np.zeros(2))
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(16, 4)), rng.integers(0, 2, 16)
        opt = OptimizerState("adam", 0.01)
        for _ in range(20):
            mask = topc_mask([l.score for l in store.layers], 50)
            _, cache = forward(store, mask, 1, X)
            apply_update(store, backward(store, mask, 1, cache, y), opt)
        return store

    a, b = run(), run()
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight) and np.array_equal(la.score, lb.score)


def test_task_mask_accepted_by_forward(small_store):
    mask = TaskMask([np.ones(s, dtype=bool) for s in small_store.weight_shapes], 100.0)
    a, _ = forward(small_store, mask, 1, np.ones((3, 5)))
    b, _ = forward(small_store, None, 1, np.ones((3, 5)))
    assert np.array_equal(a, b)
