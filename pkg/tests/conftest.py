import numpy as np
import pytest

from subnetcl.nn import DenseLayer, Head, ScoredParamStore, init_store


def central_difference(f, x, h=1e-4):
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def make_store(weights, biases=None, head_weight=None, head_bias=None, task=1):
    """Store with explicit weights; scores are zeros."""
    layers = []
    for i, w in enumerate(weights):
        w = np.asarray(w, dtype=float)
        b = np.zeros(w.shape[1]) if biases is None else np.asarray(biases[i], dtype=float)
        layers.append(DenseLayer(w, b, np.zeros_like(w)))
    feat = layers[-1].weight.shape[1]
    hw = np.eye(feat) if head_weight is None else np.asarray(head_weight, dtype=float)
    hb = np.zeros(hw.shape[1]) if head_bias is None else np.asarray(head_bias, dtype=float)
    return ScoredParamStore(layers, {task: Head(hw, hb)}, 0)


@pytest.fixture
def small_store():
    store = init_store([5, 7, 6], seed=3)
    rng = np.random.default_rng(0)
    store.heads[1] = Head(rng.normal(size=(6, 3)), rng.normal(size=3))
    return store


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
