import json
import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from triggerguard.data import (
    IDENTITY, DatasetSpec, DatasetSplit, Standardization, concat, load_dataset, subsample, training_stats,
    write_sidecar,
)
from triggerguard.defenses.ood import cinic_non_cifar
from triggerguard.errors import ConfigError, IngestionError
from triggerguard.synthetic import synthetic_pixels, synthetic_split


def test_cifar10_loader_shapes_and_standardization(fake_root):
    train = load_dataset(DatasetSpec("cifar10", "train", fake_root))
    test = load_dataset(DatasetSpec("cifar10", "test", fake_root))
    assert train.images.shape == (400, 3, 32, 32) and train.images.dtype == np.float32
    assert len(test) == 160 and train.num_classes == 10
    # train split is standardized with its own statistics: per-channel mean 0, std 1
    np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(train.images.std(axis=(0, 2, 3)), 1, atol=1e-3)
    assert test.stats == train.stats


def test_loader_matches_raw_pickle(fake_root):
    with open(fake_root / "cifar-10-batches-py" / "data_batch_1", "rb") as f:
        raw = pickle.load(f)
    train = load_dataset(DatasetSpec("cifar10", "train", fake_root))
    first = raw[b"data"][0].reshape(3, 32, 32) / 255.0
    np.testing.assert_allclose(train.pixels()[0], first, atol=1e-5)
    assert train.labels[0] == raw[b"labels"][0]


def test_foreign_loaders(fake_root):
    c100 = load_dataset(DatasetSpec("cifar100", "test", fake_root))
    assert c100.num_classes == 100 and c100.labels.max() < 100
    svhn = load_dataset(DatasetSpec("svhn", "train", fake_root / "svhn"))
    assert svhn.labels.min() >= 0 and svhn.labels.max() <= 9
    cinic = load_dataset(DatasetSpec("cinic10", "train", fake_root / "cinic-10"))
    assert len(cinic) == 200 and sum(cinic.meta["from_cifar"]) == 100
    non = cinic_non_cifar(cinic)
    assert len(non) == 100 and set(non.sources) == {"cinic10_noncifar"}


def test_foreign_split_in_task_space(fake_root):
    stats = training_stats("cifar10", str(fake_root))
    c100 = load_dataset(DatasetSpec("cifar100", "test", fake_root), stats=stats)
    own = load_dataset(DatasetSpec("cifar100", "test", fake_root))
    np.testing.assert_allclose(c100.pixels(), own.pixels(), atol=1e-5)


def test_take_subsets_per_example_meta(fake_root):
    cinic = load_dataset(DatasetSpec("cinic10", "train", fake_root / "cinic-10"))
    part = cinic.take([0, 150, 199])
    assert part.meta["from_cifar"] == [cinic.meta["from_cifar"][i] for i in (0, 150, 199)]


def test_missing_file_names_path(tmp_path):
    with pytest.raises(IngestionError) as e:
        load_dataset(DatasetSpec("cifar10", "test", tmp_path))
    assert "test_batch" in str(e.value.path)


def test_corrupt_file(tmp_path):
    d = tmp_path / "cifar-100-python"
    d.mkdir()
    (d / "test").write_bytes(b"not a pickle")
    with pytest.raises(IngestionError, match="corrupt"):
        load_dataset(DatasetSpec("cifar100", "test", tmp_path))


def test_bad_spec():
    with pytest.raises(ConfigError):
        DatasetSpec("mnist", "train", "/x")
    with pytest.raises(ConfigError):
        DatasetSpec("cifar10", "valid", "/x")


def test_sidecar(fake_root, tmp_path):
    split = load_dataset(DatasetSpec("cifar10", "test", fake_root), sidecar_dir=tmp_path)
    meta = json.loads((tmp_path / "cifar10-test.json").read_text())
    assert meta["checksum"] == split.checksum()
    assert meta["num_examples"] == 160
    assert any(k.endswith("test_batch") for k in meta["file_checksums"])
    write_sidecar(split, tmp_path / "again.json")
    assert json.loads((tmp_path / "again.json").read_text())["checksum"] == split.checksum()


def test_standardization_roundtrip(rng):
    x = rng.uniform(0, 1, (5, 3, 32, 32)).astype(np.float32)
    s = Standardization.fit(x)
    np.testing.assert_allclose(s.invert(s.apply(x)), x, atol=1e-6)
    assert Standardization.from_dict(s.to_dict()) == s
    lo, hi = s.bounds()
    assert np.all(s.apply(np.zeros_like(x)) >= lo.reshape(1, 3, 1, 1) - 1e-6)
    assert np.all(s.apply(np.ones_like(x)) <= hi.reshape(1, 3, 1, 1) + 1e-6)


def test_split_validation():
    with pytest.raises(ValueError):
        DatasetSplit(np.zeros((2, 3, 32, 32)), [0, 10], 10, "x")
    with pytest.raises(ValueError):
        DatasetSplit(np.zeros((2, 32, 32, 3)), [0, 1], 10, "x")


def test_concat_requires_same_space():
    a = synthetic_split(10, seed=1)
    b = synthetic_split(10, seed=2)
    with pytest.raises(ValueError):
        concat([a, b], "ab")
    ab = concat([a, b.restandardize(a.stats)], "ab")
    assert len(ab) == 20


# -- subsample: determinism and exact counts ------------------------------------------

def _split(n):
    # pixel value encodes the source index
    images = np.arange(n, dtype=np.float32)[:, None, None, None] * np.ones((1, 3, 32, 32), np.float32)
    return DatasetSplit(images, np.arange(n) % 10, 10, "s", stats=IDENTITY)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), frac=st.floats(0.01, 1.0), seed=st.integers(0, 2 ** 31))
def test_subsample_properties(n, frac, seed):
    split = _split(n)
    k = math.floor(frac * n + 1e-9)
    if k < 1:
        with pytest.raises(ConfigError):
            subsample(split, frac, seed)
        return
    a, b = subsample(split, frac, seed), subsample(split, frac, seed)
    ids = a.images[:, 0, 0, 0].astype(int)
    assert len(a) == k
    np.testing.assert_array_equal(ids, b.images[:, 0, 0, 0].astype(int))
    assert np.all(np.diff(ids) > 0)


def test_subsample_indices_sorted_and_unique():
    split = _split(90)
    sub = subsample(split, 1 / 3, seed=7)
    ids = sub.images[:, 0, 0, 0].astype(int)
    assert len(sub) == 30 and len(set(ids)) == 30 and np.all(np.diff(ids) > 0)
    assert subsample(split, 1.0, 0) is split
    other = subsample(split, 1 / 3, seed=8).images[:, 0, 0, 0].astype(int)
    assert not np.array_equal(ids, other)


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_subsample_rejects_bad_fraction(frac):
    with pytest.raises(ConfigError):
        subsample(_split(10), frac, 0)


def test_synthetic_styles_differ():
    a, _ = synthetic_pixels(50, style="blobs")
    b, _ = synthetic_pixels(50, style="stripes")
    assert a.min() >= 0 and a.max() <= 1
    assert abs(a.std() - b.std()) > 0.01 or abs(a.mean() - b.mean()) > 0.01
