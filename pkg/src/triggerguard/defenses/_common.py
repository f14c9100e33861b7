import numpy as np

from ..errors import ValidationError
from ..metrics import accuracy, binary_metrics
from ..models import ArchSpec, TrainConfig, build_model, train


def holdout(split, fraction, seed):
    """Random (train, held-out) partition of a split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(split))
    k = int(round(fraction * len(split)))
    if k < 1 or k >= len(split):
        raise ValidationError(f"holdout fraction {fraction} leaves an empty side for {len(split)} examples")
    return split.take(np.sort(perm[k:])), split.take(np.sort(perm[:k]))


def check_binary(split, min_share=0.0):
    counts = np.bincount(split.labels, minlength=2)
    if split.num_classes != 2 or len(counts) != 2 or counts.min() == 0:
        raise ValidationError(f"expected a binary split with both classes present, got counts {counts.tolist()}")
    if counts.min() / counts.sum() < min_share:
        raise ValidationError(f"binary split is unbalanced: counts {counts.tolist()}")
    return counts


def train_binary_detector(binary, arch, cfg, test_split=None, holdout_fraction=0.2, seed=0):
    """Train a 2-way classifier and score it on a held-out binary split.

    Returns ``(model, metrics)`` where metrics holds precision/recall/F1 with
    class 1 as positive plus accuracy and the confusion counts.
    """
    if isinstance(arch, str):
        arch = ArchSpec(arch, 2)
    if isinstance(cfg, dict):
        cfg = TrainConfig(**cfg)
    if arch.num_outputs != 2:
        raise ValidationError("detectors need a 2-way output head")
    if test_split is None:
        binary, test_split = holdout(binary, holdout_fraction, seed)
    model = train(build_model(arch, seed), binary, test_split, cfg)
    preds = model.predict_labels(test_split.images)
    return model, score_binary(test_split.labels, preds)


def score_binary(y_true, y_pred):
    p, r, f1 = binary_metrics(y_true, y_pred)
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return {
        "precision": p, "recall": r, "f1": f1, "accuracy": accuracy(y_true, y_pred),
        "tp": int(np.sum((y_pred == 1) & (y_true == 1))), "fp": int(np.sum((y_pred == 1) & (y_true == 0))),
        "fn": int(np.sum((y_pred == 0) & (y_true == 1))), "tn": int(np.sum((y_pred == 0) & (y_true == 0))),
    }
