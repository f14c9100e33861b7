"""Wrapper against random-label triggers.

A partially trained VGG16-BN supplies features from its second-to-last
convolution; a shallow classifier on those features (RBF SVM, optionally after
PCA) answers every query in place of the inner model.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.svm import SVC

from ..errors import ConfigError, TrainingError, ValidationError
from ..models import ArchSpec, TrainConfig, build_model, extract_features, train

log = logging.getLogger(__name__)

EXTRACTOR_HOOK = "features.relu12"  # activation of the second-to-last conv of VGG16-BN
CV_FOLDS = 5


@dataclass
class PartialExtractor:
    model: object
    hook_layer: str = EXTRACTOR_HOOK
    epochs_trained: int = 0
    epoch_budget: int = 50
    feature_dim: int = None

    def features(self, images):
        fm = extract_features(self.model, self.hook_layer, images)
        if self.feature_dim is None:
            self.feature_dim = fm.dim
        elif fm.dim != self.feature_dim:
            raise ValidationError(f"feature dim changed from {self.feature_dim} to {fm.dim}")
        return fm.values


def train_partial_extractor(train_split, cfg=None, partial_epochs=15, eval_split=None, width=1.0, seed=0,
                            hook_layer=EXTRACTOR_HOOK):
    """Train VGG16-BN on the correct labels for ``partial_epochs`` of a ``cfg.epochs`` budget."""
    cfg = cfg or TrainConfig(learning_rate=0.01, batch_size=64, epochs=50, seed=seed)
    if isinstance(cfg, dict):
        cfg = TrainConfig(**cfg)
    if not (1 <= partial_epochs <= cfg.epochs):
        raise ValidationError(f"partial_epochs must lie in [1, {cfg.epochs}], got {partial_epochs}")
    short = TrainConfig(**{**cfg.to_dict(), "epochs": partial_epochs})
    model = build_model(ArchSpec("vgg16_bn", train_split.num_classes, width), seed)
    model = train(model, train_split, eval_split, short)
    return PartialExtractor(model, hook_layer, len(model.history), cfg.epochs)


@dataclass
class PCAProjection:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    variance_fraction_requested: float
    explained_variance_ratio: np.ndarray

    @property
    def n_components_kept(self):
        return self.components.shape[0]

    def transform(self, x):
        return (np.asarray(x, np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, z):
        return np.asarray(z) @ self.components + self.mean


def fit_pca(features, variance_fraction=0.95):
    """Keep the fewest principal components whose cumulative explained variance
    reaches ``variance_fraction``. ``None`` means no projection (returns None)."""
    if variance_fraction is None:
        return None
    if not (0.0 < variance_fraction <= 1.0):
        raise ConfigError("variance_fraction must lie in (0, 1]", key_path="variance_fraction")
    x = np.asarray(getattr(features, "values", features), np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("PCA needs a 2-D matrix with at least two rows")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    if not np.any(var > 0):
        zero = np.flatnonzero(var == 0)
        raise ValidationError(f"features are constant; zero-variance dims: {zero.tolist()[:20]}"
                              + (" ..." if len(zero) > 20 else ""))
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    ev = s ** 2
    ratio = ev / ev.sum()
    cum = np.cumsum(ratio)
    k = min(int(np.searchsorted(cum, variance_fraction - 1e-12)) + 1, len(s))
    return PCAProjection(mean, vt[:k], float(variance_fraction), ratio[:k])


def _canonical_order(x, y):
    # order rows by (label, content digest) so fold assignment ignores input order
    digests = np.array([hashlib.sha1(row.tobytes()).hexdigest() for row in np.ascontiguousarray(x)])
    return np.lexsort((digests, y))


@dataclass
class FeatureClassifier:
    kind: str
    estimator: object
    cv_accuracy: float = None
    cv_std: float = None
    params: dict = field(default_factory=dict)
    label_map: np.ndarray = None  # kmeans: cluster -> label

    def predict(self, x):
        pred = self.estimator.predict(x)
        return self.label_map[pred] if self.label_map is not None else np.asarray(pred, np.int64)

    def ranked_labels(self, x):
        if not hasattr(self.estimator, "decision_function"):
            return self.predict(x)[:, None]
        scores = self.estimator.decision_function(x)
        return np.asarray(self.estimator.classes_)[np.argsort(-scores, axis=1)]


def train_feature_svm(features, labels, projection=None, c_grid=(1.0, 10.0), gamma="scale", seed=0):
    """RBF SVM on (projected) features; C picked by 5-fold stratified CV whose
    mean and std accuracy are recorded."""
    x = np.asarray(getattr(features, "values", features), np.float64)
    y = np.asarray(labels, np.int64)
    if projection is not None:
        x = projection.transform(x)
    counts = np.bincount(y)
    present = counts[counts > 0]
    if present.min() < CV_FOLDS:
        raise ValidationError(f"stratification error: every class needs >= {CV_FOLDS} examples, "
                              f"smallest has {present.min()}")
    order = _canonical_order(x, y)
    x, y = x[order], y[order]
    folds = StratifiedKFold(CV_FOLDS, shuffle=True, random_state=seed)
    best = None
    for c in c_grid:
        scores = cross_val_score(SVC(C=c, kernel="rbf", gamma=gamma), x, y, cv=folds)
        log.info("svm C=%g: cv %.4f +- %.4f", c, scores.mean(), scores.std())
        if best is None or scores.mean() > best[1].mean():
            best = (c, scores)
    c, scores = best
    est = SVC(C=c, kernel="rbf", gamma=gamma).fit(x, y)
    return FeatureClassifier("svm", est, float(scores.mean()), float(scores.std()),
                             {"C": c, "gamma": gamma, "fold_scores": scores.tolist()})


def contingency(clusters, labels, k):
    m = np.zeros((k, k), np.int64)
    np.add.at(m, (np.asarray(clusters), np.asarray(labels)), 1)
    return m


def hungarian_assignment(matrix):
    """Cluster -> label mapping maximizing the summed agreement of a square contingency matrix."""
    rows, cols = linear_sum_assignment(np.asarray(matrix), maximize=True)
    mapping = np.empty(len(rows), np.int64)
    mapping[rows] = cols
    return mapping


def _fit_kmeans(x, k, seed):
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(x)
    return km, np.bincount(km.labels_, minlength=k)


def kmeans_clusterer(features, labels, k, seed=0):
    """K-Means plus Hungarian cluster->label mapping, as a FeatureClassifier."""
    x = np.asarray(getattr(features, "values", features), np.float64)
    y = np.asarray(labels, np.int64)
    if y.max() >= k:
        raise ValidationError(f"labels exceed k={k}")
    km, sizes = _fit_kmeans(x, k, seed)
    if (sizes == 0).any():
        log.warning("empty K-Means cluster; re-seeding once")
        km, sizes = _fit_kmeans(x, k, seed + 1)
        if (sizes == 0).any():
            raise TrainingError(f"K-Means produced empty clusters {np.flatnonzero(sizes == 0).tolist()}")
    mapping = hungarian_assignment(contingency(km.labels_, y, k))
    acc = float(np.mean(mapping[km.labels_] == y))
    return FeatureClassifier("kmeans", km, acc, None, {"k": k}, mapping)


def kmeans_hungarian_accuracy(features, labels, k, seed=0):
    return kmeans_clusterer(features, labels, k, seed).cv_accuracy


@dataclass
class RLWrappedModel:
    """Answers every query with the feature classifier's label.

    ``policy='arbitrate'`` instead keeps the inner model's label whenever it
    is among the classifier's top two classes.
    """

    extractor: PartialExtractor
    classifier: FeatureClassifier
    inner: object = None
    projection: PCAProjection = None
    policy: str = "substitute"

    def __post_init__(self):
        if self.policy not in ("substitute", "arbitrate"):
            raise ConfigError(f"unknown policy {self.policy!r}", key_path="wrapper.policy")

    def _features(self, images):
        f = self.extractor.features(images)
        return self.projection.transform(f) if self.projection is not None else f

    def predict_labels(self, images):
        images = np.asarray(images, np.float32)
        if len(images) == 0:
            return np.zeros(0, np.int64)
        z = self._features(images)
        if self.policy == "substitute" or self.inner is None:
            return self.classifier.predict(z)
        ranked = self.classifier.ranked_labels(z)[:, :2]
        inner = np.asarray(self.inner.predict_labels(images))
        keep = (ranked == inner[:, None]).any(axis=1)
        return np.where(keep, inner, ranked[:, 0])
