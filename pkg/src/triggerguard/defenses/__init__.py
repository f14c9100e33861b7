"""Inference-time wrappers that detect trigger inputs and deny, purify or relabel them."""

from .adversarial import AdvDetector, AdvWrappedModel, Purifier, build_adv_pairs, train_adv_detector, train_purifier
from .ood import NegativePool, OODDetector, OODWrappedModel, build_ood_training_set, train_ood_detector
from .randomlabel import (FeatureClassifier, PartialExtractor, PCAProjection, RLWrappedModel, fit_pca,
                          hungarian_assignment, kmeans_clusterer, kmeans_hungarian_accuracy, train_feature_svm,
                          train_partial_extractor)

__all__ = [
    "AdvDetector", "AdvWrappedModel", "Purifier", "build_adv_pairs", "train_adv_detector", "train_purifier",
    "NegativePool", "OODDetector", "OODWrappedModel", "build_ood_training_set", "train_ood_detector",
    "FeatureClassifier", "PartialExtractor", "PCAProjection", "RLWrappedModel", "fit_pca",
    "hungarian_assignment", "kmeans_clusterer", "kmeans_hungarian_accuracy", "train_feature_svm", "train_partial_extractor",
]
