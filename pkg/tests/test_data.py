import gzip
import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from subnetcl.data import (
    Dataset,
    denormalize,
    fewshot_sessions,
    gaussian_dataset,
    holdout_validation,
    load_csv,
    load_idx,
    minmax_normalize,
    permuted_tasks,
    read_idx,
    split_tasks,
    stream_from_descriptor,
    synth_gaussian_tasks,
    task_permutation,
)
from subnetcl.errors import ConfigError, ParseError


def write_idx(path, array, code=0x08, compress=False):
    array = np.asarray(array)
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.astype(">u1").tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(data)
    return path


@pytest.fixture
def tiny_idx(tmp_path):
    images = np.array([[[0, 1], [2, 255]], [[10, 20], [30, 40]]], dtype=np.uint8)
    img = write_idx(tmp_path / "img.idx", images)
    lab = write_idx(tmp_path / "lab.idx", np.array([3, 7], dtype=np.uint8))
    return img, lab


def test_load_idx_exact_pixels(tiny_idx):
    ds = load_idx(*tiny_idx)
    assert ds.features.shape == (2, 4)
    assert ds.features[0].tolist() == [0.0, 1 / 255, 2 / 255, 1.0]
    assert ds.labels.tolist() == [3, 7]
    assert np.array_equal(np.round(denormalize(ds.features, ds.normalization)), [[0, 1, 2, 255], [10, 20, 30, 40]])


def test_read_idx_gzip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    assert np.array_equal(read_idx(write_idx(tmp_path / "a.gz", arr, compress=True)), arr)


def test_truncated_header_reports_offset(tmp_path):
    path = tmp_path / "t.idx"
    path.write_bytes(bytes([0, 0, 8, 3]) + b"\x00\x00")
    with pytest.raises(ParseError) as info:
        read_idx(path)
    assert info.value.offset == 4


def test_bad_magic_and_truncated_body(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x01\x02\x08\x01" + struct.pack(">I", 1) + b"\x00")
    with pytest.raises(ParseError) as info:
        read_idx(bad)
    assert info.value.offset == 0
    short = tmp_path / "short.idx"
    short.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", 5) + b"\x00\x01")
    with pytest.raises(ParseError):
        read_idx(short)


def test_label_out_of_range(tmp_path, tiny_idx):
    img, _ = tiny_idx
    lab = write_idx(tmp_path / "l10.idx", np.array([10, 1], dtype=np.uint8))
    with pytest.raises(ConfigError):
        load_idx(img, lab, n_classes=10)


def test_load_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,label,b\n0,1,10\n5,0,20\n10,2,30\n")
    ds = load_csv(path)
    assert ds.n_classes == 3 and ds.labels.tolist() == [1, 0, 2]
    assert ds.features.min() == 0 and ds.features.max() == 1
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ParseError):
        load_csv(tmp_path / "bad.csv")


def test_minmax_roundtrip():
    x = np.random.default_rng(0).normal(size=(10, 3)) * 7
    scaled, rec = minmax_normalize(x)
    assert scaled.min() == 0 and scaled.max() == 1
    assert np.allclose(denormalize(scaled, rec), x, atol=1e-12)


def _base(n=60, dim=9, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, dim)), rng.integers(0, classes, n), classes)


def test_permuted_tasks():
    train, test = _base(), _base(seed=1)
    stream = permuted_tasks(train, test, 4, seed=5)
    assert np.array_equal(stream[0].train.features, train.features)
    for t in range(1, 4):
        perm = task_permutation(9, t, 5)
        assert sorted(perm) == list(range(9))
        assert np.array_equal(stream[t].train.features, train.features[:, perm])
        assert np.array_equal(stream[t].test.features, test.features[:, perm])
        assert np.array_equal(np.sort(stream[t].train.features, axis=1), np.sort(train.features, axis=1))
        twice = train.features[:, perm][:, perm]
        assert not np.array_equal(twice, stream[t].train.features)
    again = permuted_tasks(train, test, 4, seed=5)
    assert all(np.array_equal(a.train.features, b.train.features) for a, b in zip(stream, again))


def test_split_tasks():
    train, test = _base(classes=6), _base(classes=6, seed=1)
    stream = split_tasks(train, test, 3)
    assert len(stream) == 2
    for task in stream:
        assert set(task.train.labels.tolist()) <= {0, 1, 2}
    groups = stream.descriptor["groups"]
    assert sorted(groups[0] + groups[1]) == list(range(6)) and not set(groups[0]) & set(groups[1])
    assert sum(len(t.train) for t in stream) == len(train)
    assert sum(len(t.test) for t in stream) == len(test)
    with pytest.raises(ConfigError):
        split_tasks(train, test, 4)
    shuffled = split_tasks(train, test, 2, seed=3)
    assert sorted(sum(shuffled.descriptor["groups"], [])) == list(range(6))


def test_fewshot_sessions():
    train, test = gaussian_dataset(16, 4, 2.0, seed=0, samples_per_class=20)
    sessions = fewshot_sessions(train, test, 6, 5, 5, seed=1)
    assert len(sessions) == 3
    assert sessions[0].classes == tuple(range(6))
    seen = set()
    for s in sessions:
        assert not seen & set(s.classes)
        seen |= set(s.classes)
    for s in sessions[1:]:
        assert len(s.train) == 25
        assert set(s.test.labels.tolist()) == set(s.classes)
    again = fewshot_sessions(train, test, 6, 5, 5, seed=1)
    assert all(np.array_equal(a.train.features, b.train.features) for a, b in zip(sessions, again))
    with pytest.raises(ConfigError):
        fewshot_sessions(train, test, 6, 5, 5, seed=1, n_sessions=3)


def test_gaussian_linear_oracle():
    stream = synth_gaussian_tasks(2, 4, 16, 10.0, seed=0)
    for task in stream:
        clf = LogisticRegression(max_iter=1000).fit(task.train.features, task.train.labels)
        assert clf.score(task.test.features, task.test.labels) >= 0.99
        assert len(task.train) == 320 and len(task.test) == 80


def test_gaussian_zero_separation_is_chance():
    train, test = gaussian_dataset(4, 16, 0.0, seed=0, samples_per_class=500)
    clf = LogisticRegression(max_iter=1000).fit(train.features, train.labels)
    assert abs(clf.score(test.features, test.labels) - 0.25) < 0.1


def test_stream_regenerates_from_descriptor():
    stream = synth_gaussian_tasks(3, 2, 5, 1.5, seed=8, samples_per_class=10)
    again = stream_from_descriptor(stream.descriptor)
    for a, b in zip(stream, again):
        assert np.array_equal(a.train.features, b.train.features)
        assert np.array_equal(a.test.labels, b.test.labels)


def test_holdout_validation():
    ds = _base(n=100)
    train, val = holdout_validation(ds, 0.1, seed=0)
    assert len(val) == 10 and len(train) == 90


def test_dataset_rejects_bad_labels():
    with pytest.raises(ConfigError):
        Dataset(np.zeros((2, 2)), [0, 3], 3)
