import numpy as np
import pytest
from sklearn.base import clone

from subnetcl import SoftNetFSCIL, WSNClassifier
from subnetcl.data import gaussian_dataset, synth_gaussian_tasks
from subnetcl.errors import MissingHeadError, SessionSpecError


def test_wsn_classifier_is_forget_free():
    stream = synth_gaussian_tasks(3, 3, 8, 4.0, seed=0, samples_per_class=40)
    clf = WSNClassifier(hidden_sizes=(16, 16), epochs=5, lr=1e-2, random_state=0)
    first = stream[0]
    clf.fit(first.train.features, first.train.labels + 10)
    before = clf.predict_proba(first.test.features, task=1)
    score1 = clf.score(first.test.features, first.test.labels + 10, task=1)
    assert set(clf.predict(first.test.features, task=1)) <= {10, 11, 12}
    for t in stream.tasks[1:]:
        clf.partial_fit(t.train.features, t.train.labels)
    assert clf.last_task_ == 3
    assert np.array_equal(before, clf.predict_proba(first.test.features, task=1))
    assert clf.score(first.test.features, first.test.labels + 10, task=1) == score1
    with pytest.raises(MissingHeadError):
        clf.predict(first.test.features, task=9)


def test_wsn_clone_and_params():
    clf = WSNClassifier(capacity=10)
    other = clone(clf)
    assert other.get_params()["capacity"] == 10 and not hasattr(other, "store_")


def test_softnet_estimator():
    train, test = gaussian_dataset(6, 8, 6.0, 0, samples_per_class=30)
    base = train.labels < 4
    est = SoftNetFSCIL(hidden_sizes=(32, 32), base_epochs=20, random_state=0)
    est.fit(train.features[base], train.labels[base])
    assert est.transform(test.features).shape == (len(test), 32)
    tb = test.labels < 4
    assert est.score(test.features[tb], test.labels[tb]) >= 0.9
    novel = np.flatnonzero(~base)[[0, 1, 2, 24, 25, 26]]
    major = [w[m].copy() for w, m in zip((l.weight for l in est.store_.layers), est.soft_mask_.major)]
    est.partial_fit(train.features[novel], train.labels[novel])
    assert list(est.classes_) == list(range(6))
    for l, m, b in zip(est.store_.layers, est.soft_mask_.major, major):
        assert np.array_equal(l.weight[m], b)
    with pytest.raises(SessionSpecError):
        est.partial_fit(train.features[:3], train.labels[:3])
