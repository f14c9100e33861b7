import numpy as np

from .errors import ValidationError


def binary_metrics(y_true, y_pred, positive=1):
    """Precision, recall and F1 with ``positive`` as the positive class.

    F1 is 0 when precision + recall is 0. Precision (recall) is 0 when there
    are no predicted (actual) positives.
    """
    y_true = np.asarray(y_true).reshape(-1)
    y_pred = np.asarray(y_pred).reshape(-1)
    if y_true.size == 0:
        raise ValidationError("binary metrics undefined on an empty split")
    if y_true.shape != y_pred.shape:
        raise ValidationError("label and prediction arrays differ in length")
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def accuracy(y_true, y_pred):
    y_true = np.asarray(y_true).reshape(-1)
    y_pred = np.asarray(y_pred).reshape(-1)
    if y_true.size == 0:
        raise ValidationError("accuracy undefined on an empty split")
    return float(np.mean(y_true == y_pred))
