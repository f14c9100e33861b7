import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from triggerguard.data import IDENTITY, DatasetSplit
from triggerguard.defenses import (
    AdvWrappedModel, NegativePool, OODWrappedModel, build_adv_pairs, build_ood_training_set, fit_pca,
    hungarian_assignment, kmeans_clusterer, train_adv_detector, train_feature_svm, train_ood_detector,
    train_purifier,
)
from triggerguard.defenses._common import check_binary, holdout, score_binary
from triggerguard.defenses.adversarial import AdvDetector, Purifier
from triggerguard.defenses.ood import OODDetector, _allocate
from triggerguard.defenses.randomlabel import FeatureClassifier, RLWrappedModel, contingency
from triggerguard.errors import ConfigError, ValidationError
from triggerguard.metrics import binary_metrics
from triggerguard.models import ArchSpec, TrainConfig
from triggerguard.synthetic import synthetic_split

TINY = ArchSpec("vgg11", 2, 0.125)


class Const:
    """Stub model answering a fixed label (or a per-call function of the images)."""

    def __init__(self, fn, classes=10):
        self.fn = fn if callable(fn) else (lambda x, v=fn: np.full(len(x), v))
        self.arch = ArchSpec("vgg11", classes)
        self.calls = []

    def predict_labels(self, images):
        self.calls.append(np.asarray(images).copy())
        return np.asarray(self.fn(np.asarray(images)), np.int64)


# -- metrics vs confusion-count oracle ----------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_binary_metrics_oracle(pairs):
    y, p = np.array(pairs).T
    tp = sum(1 for a, b in pairs if a == 1 and b == 1)
    fp = sum(1 for a, b in pairs if a == 0 and b == 1)
    fn = sum(1 for a, b in pairs if a == 1 and b == 0)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    got = binary_metrics(y, p)
    assert got == pytest.approx((prec, rec, f1), abs=1e-12)
    s = score_binary(y, p)
    assert (s["tp"], s["fp"], s["fn"]) == (tp, fp, fn) and s["tn"] == len(pairs) - tp - fp - fn


def test_binary_metrics_empty():
    with pytest.raises(ValidationError):
        binary_metrics([], [])


# -- OOD wrapper ----------------------------------------------------------------------------

def test_denial_labels_uniform():
    # detector flags everything: every answer comes from the denial stream
    wrapped = OODWrappedModel(OODDetector(Const(0, 2)), Const(3), denial_seed=11)
    labels = wrapped.predict_labels(np.zeros((10_000, 3, 32, 32), np.float32))
    counts = np.bincount(labels, minlength=10)
    assert chisquare(counts).pvalue > 0.01


def test_denial_stream_reset_replays():
    wrapped = OODWrappedModel(OODDetector(Const(0, 2)), Const(3), denial_seed=5)
    x = np.zeros((50, 3, 32, 32), np.float32)
    a = wrapped.predict_labels(x)
    b = wrapped.predict_labels(x)
    wrapped.reset()
    np.testing.assert_array_equal(wrapped.predict_labels(x), a)
    assert not np.array_equal(a, b)


def test_ood_routing():
    x = np.arange(6, dtype=np.float32)[:, None, None, None] * np.ones((1, 3, 32, 32), np.float32)
    detector = OODDetector(Const(lambda im: (im[:, 0, 0, 0] % 2 == 0).astype(int), 2))
    inner = Const(7)
    labels, route = OODWrappedModel(detector, inner, denial_seed=0).predict_with_route(x)
    np.testing.assert_array_equal(route, [1, 0, 1, 0, 1, 0])
    assert np.all(labels[route == 1] == 7)
    # the inner model never sees denied inputs
    np.testing.assert_array_equal(inner.calls[0][:, 0, 0, 0], [0, 2, 4])
    assert OODWrappedModel(detector, inner).predict_labels(x[:0]).shape == (0,)


def _src(name, n, value):
    return DatasetSplit(np.full((n, 3, 32, 32), value, np.float32), np.zeros(n, int), 10, name, stats=IDENTITY,
                        sources=np.full(n, name.split("-")[0], dtype=object))


def test_pool_modes():
    srcs = [_src("cifar100-train", 30, 1.0), _src("svhn-train", 20, 2.0), _src("cinic10-train", 10, 3.0)]
    diluted = NegativePool(list(srcs), "diluted", ("cifar100",))
    excluded = NegativePool(list(srcs), "excluded", ("cifar100",))
    assert diluted.source_ids == ["cifar100", "svhn", "cinic10"]
    assert excluded.source_ids == ["svhn", "cinic10"]
    assert sum(excluded.proportions) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        NegativePool([srcs[0]], "excluded", ("cifar100",))
    with pytest.raises(ConfigError):
        NegativePool(list(srcs), "mixed")


@settings(max_examples=100, deadline=None)
@given(total=st.integers(0, 500), props=st.lists(st.floats(0.01, 10), min_size=1, max_size=5))
def test_allocation_sums(total, props):
    p = np.asarray(props) / sum(props)
    counts = _allocate(total, p)
    assert counts.sum() == total and np.all(counts >= 0)
    assert np.all(np.abs(counts - p * total) < 1 + 1e-9)


def test_ood_training_set_composition():
    in_dist = _src("cifar10-train", 40, 0.0)
    pool = NegativePool([_src("cifar100-train", 30, 1.0), _src("svhn-train", 30, 2.0)], "diluted", seed=3)
    binary = build_ood_training_set(in_dist, pool)
    assert len(binary) == 80 and binary.num_classes == 2
    assert np.sum(binary.labels == 1) == 40
    neg = binary.images[binary.labels == 0, 0, 0, 0]
    assert sorted(set(neg.tolist())) == [1.0, 2.0] and np.sum(neg == 1.0) == 20
    assert binary.meta["pool"]["mode"] == "diluted"
    assert build_ood_training_set(in_dist, pool).checksum() == binary.checksum()


def test_ood_detector_learns_separable_task():
    tr = synthetic_split(120, seed=1, template_seed=1, name="cifar10-train")
    far = synthetic_split(120, seed=2, template_seed=9, style="stripes", name="svhn-train")
    pool = NegativePool([far], "diluted")
    binary = build_ood_training_set(tr, pool)
    det = train_ood_detector(binary, TINY, TrainConfig(epochs=8, batch_size=32, learning_rate=0.001))
    assert det.metrics["accuracy"] > 0.8
    assert set(det.metrics) >= {"precision", "recall", "f1", "tp", "fp", "fn", "tn"}
    with pytest.raises(ConfigError):
        train_ood_detector(binary, ArchSpec("vgg16_bn", 2))


# -- adversarial wrapper --------------------------------------------------------------------

def test_adv_routing_purifies_only_flagged():
    x = np.arange(4, dtype=np.float32)[:, None, None, None] * np.ones((1, 3, 32, 32), np.float32) / 10

    class Shift:
        def purify(self, images):
            return images + 100

    detector = AdvDetector(Const(lambda im: np.array([1, 0, 1, 0])[: len(im)], 2))
    inner = Const(lambda im: (im[:, 0, 0, 0] > 50).astype(int))
    labels, route = AdvWrappedModel(detector, Shift(), inner).predict_with_route(x)
    np.testing.assert_array_equal(route, [1, 0, 1, 0])
    np.testing.assert_array_equal(labels, [0, 1, 0, 1])


def test_adv_pairs_and_detector():
    from tests.test_watermarking import linear_model

    tr = synthetic_split(100, seed=1, template_seed=1)
    pairs = build_adv_pairs(tr, linear_model(), 16 / 255)
    adv_px, clean_px = pairs.pixel_pairs()
    assert np.abs(adv_px - clean_px).max() <= 16 / 255 + 1e-5
    binary = pairs.binary_split()
    assert len(binary) == 200 and check_binary(binary).tolist() == [100, 100]
    det = train_adv_detector(binary, TINY, TrainConfig(epochs=2, batch_size=32), seed=0)
    m = det.metrics
    assert m["tp"] + m["fp"] + m["fn"] + m["tn"] == 40


def test_adv_detector_rejects_unbalanced():
    tr = synthetic_split(50, seed=1)
    skew = tr.relabel((np.arange(50) < 5).astype(int), 2)
    with pytest.raises(ValidationError):
        train_adv_detector(skew, TINY, TrainConfig(epochs=1))


def test_purifier_meta_and_range():
    from tests.test_watermarking import linear_model

    tr = synthetic_split(60, seed=1, template_seed=1)
    pairs = build_adv_pairs(tr, linear_model(), 8 / 255)
    pur = train_purifier(pairs, TrainConfig(loss="mse", epochs=2, batch_size=16), width=0.25)
    assert {"heldout_reconstruction_mse", "heldout_perturbation_mse"} <= set(pur.train_meta)
    px = tr.stats.invert(pur.purify(tr.images[:4]))
    assert px.min() >= -1e-5 and px.max() <= 1 + 1e-5
    assert isinstance(pur, Purifier)


def test_holdout_partition():
    tr = synthetic_split(50, seed=1)
    a, b = holdout(tr, 0.2, 0)
    assert len(a) == 40 and len(b) == 10
    with pytest.raises(ValidationError):
        holdout(tr, 0.0, 0)


# -- PCA vs eigen-scan oracle -----------------------------------------------------------------

def _eigen_scan(x, frac):
    cov = np.cov(x, rowvar=False, bias=True)
    ev = np.sort(np.linalg.eigvalsh(cov))[::-1]
    ev = np.clip(ev, 0, None)
    cum, k = 0.0, 0
    while k < len(ev):
        cum += ev[k]
        k += 1
        if cum / ev.sum() >= frac - 1e-12:
            break
    return k


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(2, 24), frac=st.sampled_from([0.5, 0.8, 0.85, 0.9, 0.95, 0.99, 1.0]))
def test_pca_component_count_oracle(seed, d, frac):
    r = np.random.default_rng(seed)
    # anisotropic data so the count is not trivially d
    x = r.normal(size=(80, d)) * np.geomspace(10, 0.1, d)
    p = fit_pca(x, frac)
    assert p.n_components_kept == _eigen_scan(x, frac)
    assert p.explained_variance_ratio.sum() >= frac - 1e-9 or p.n_components_kept == d


def test_pca_roundtrip_and_edges(rng):
    x = rng.normal(size=(50, 6))
    full = fit_pca(x, 1.0)
    np.testing.assert_allclose(full.inverse_transform(full.transform(x)), x, atol=1e-9)
    assert fit_pca(x, None) is None
    x[:, 2] = 4.0  # one constant dim is fine
    assert fit_pca(x, 0.95).n_components_kept <= 5
    with pytest.raises(ValidationError, match="zero-variance"):
        fit_pca(np.ones((10, 4)), 0.9)
    with pytest.raises(ConfigError):
        fit_pca(x, 1.5)


# -- Hungarian vs brute force ----------------------------------------------------------------

def brute_force(matrix):
    k = len(matrix)
    best = max(itertools.permutations(range(k)), key=lambda p: sum(matrix[i][p[i]] for i in range(k)))
    return best, sum(matrix[i][best[i]] for i in range(k))


def test_hungarian_matches_brute_force():
    r = np.random.default_rng(0)
    for _ in range(200):
        k = int(r.integers(1, 7))
        m = r.integers(0, 20, size=(k, k))
        mapping = hungarian_assignment(m)
        _, best = brute_force(m.tolist())
        assert sorted(mapping.tolist()) == list(range(k))
        assert m[np.arange(k), mapping].sum() == best


def test_kmeans_recovers_permuted_clusters(rng):
    centers = rng.normal(size=(4, 5)) * 20
    y = np.repeat(np.arange(4), 25)
    x = centers[y] + rng.normal(size=(100, 5))
    clf = kmeans_clusterer(x, y, 4, seed=0)
    assert clf.cv_accuracy == 1.0
    np.testing.assert_array_equal(clf.predict(x), y)
    m = contingency(clf.estimator.labels_, y, 4)
    assert m.sum() == 100


# -- SVM ---------------------------------------------------------------------------------

def _blobs(rng, n_per=12, k=3, d=8):
    centers = rng.normal(size=(k, d)) * 4
    y = np.repeat(np.arange(k), n_per)
    return centers[y] + rng.normal(size=(len(y), d)), y


def test_svm_cv_and_order_invariance(rng):
    x, y = _blobs(rng)
    a = train_feature_svm(x, y, seed=0)
    perm = rng.permutation(len(y))
    b = train_feature_svm(x[perm], y[perm], seed=0)
    assert a.cv_accuracy == b.cv_accuracy and a.params == b.params
    assert a.cv_accuracy > 0.9
    assert len(a.params["fold_scores"]) == 5
    np.testing.assert_array_equal(a.predict(x), b.predict(x))


def test_svm_with_projection(rng):
    x, y = _blobs(rng)
    p = fit_pca(x, 0.9)
    clf = train_feature_svm(x, y, projection=p)
    assert clf.estimator.shape_fit_[1] == p.n_components_kept


def test_svm_stratification_error(rng):
    x, y = _blobs(rng, n_per=4)
    with pytest.raises(ValidationError, match="stratification"):
        train_feature_svm(x, y)


# -- random-label wrapper ------------------------------------------------------------------

class FakeExtractor:
    def features(self, images):
        return np.asarray(images)[:, 0, 0, :2].astype(np.float64)


def test_rl_substitute_and_arbitrate():
    class Est:
        classes_ = np.arange(3)

        def predict(self, z):
            return np.zeros(len(z), int)

        def decision_function(self, z):
            # ranking: 0 > 1 > 2
            return np.tile([3.0, 2.0, 1.0], (len(z), 1))

    clf = FeatureClassifier("svm", Est())
    x = np.zeros((3, 3, 32, 32), np.float32)
    inner = Const(lambda im: np.array([0, 1, 2]), 3)
    sub = RLWrappedModel(FakeExtractor(), clf, inner)
    np.testing.assert_array_equal(sub.predict_labels(x), [0, 0, 0])
    arb = RLWrappedModel(FakeExtractor(), clf, inner, policy="arbitrate")
    # inner's label survives only when it is in the classifier's top two
    np.testing.assert_array_equal(arb.predict_labels(x), [0, 1, 0])
    with pytest.raises(ConfigError):
        RLWrappedModel(FakeExtractor(), clf, inner, policy="vote")
