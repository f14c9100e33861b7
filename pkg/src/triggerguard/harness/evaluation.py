import numpy as np

from ..errors import ValidationError
from ..metrics import accuracy, binary_metrics


def eval_accuracy(model, split):
    """Fraction of ``split`` the model labels correctly. Wrappers with a denial
    stream are reset first so the number is replayable."""
    if len(split) == 0:
        raise ValidationError("accuracy undefined on an empty split")
    if hasattr(model, "reset"):
        model.reset()
    return accuracy(split.labels, np.asarray(model.predict_labels(split.images)))


def eval_binary_metrics(detector, split):
    """(precision, recall, f1) of a binary detector, class 1 positive."""
    if len(split) == 0:
        raise ValidationError("binary metrics undefined on an empty split")
    if split.num_classes != 2:
        raise ValidationError("eval_binary_metrics expects a binary split")
    return binary_metrics(split.labels, np.asarray(detector.predict_labels(split.images)))
