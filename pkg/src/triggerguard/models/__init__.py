"""Model construction, training, inference and feature extraction."""

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from ..data import DatasetSplit
from ..errors import ConfigError, TrainingError, ValidationError
from ..metrics import binary_metrics
from .architectures import ARCH_IDS, DEFAULT_FEATURE_LAYER, make_network

log = logging.getLogger(__name__)

__all__ = [
    "ArchSpec", "TrainConfig", "TrainedModel", "FeatureMatrix", "build_model", "train", "predict",
    "extract_features", "save_checkpoint", "load_checkpoint", "parameter_hash", "as_image_array",
    "ARCH_IDS", "DEFAULT_FEATURE_LAYER", "layer_ids", "reconstruct",
]


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    num_outputs: int = 10
    width: float = 1.0
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        if self.arch_id not in ARCH_IDS:
            raise ConfigError(f"unknown arch_id {self.arch_id!r}; expected one of {ARCH_IDS}", key_path="arch_id")
        if self.arch_id != "autoencoder" and self.num_outputs < 1:
            raise ConfigError("num_outputs must be >= 1", key_path="num_outputs")
        if self.width <= 0:
            raise ConfigError("width must be positive", key_path="width")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    @property
    def is_classifier(self):
        return self.arch_id != "autoencoder"


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "cross_entropy"
    optimizer: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 20
    early_stopping_patience: int = None
    lr_schedule_on_eval_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}", key_path="loss")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is supported", key_path="optimizer")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.early_stopping_patience is not None and self.early_stopping_patience < 1:
            raise ValidationError("early_stopping_patience must be >= 1")

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainedModel:
    arch: ArchSpec
    network: nn.Module
    seed: int = 0
    config: TrainConfig = None
    history: list = field(default_factory=list)

    def predict_labels(self, images):
        return predict(self, images)[0]

    def logits(self, images):
        return predict(self, images)[1]

    def parameter_hash(self):
        return parameter_hash(self.network)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    layer_id: str = ""

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def build_model(spec, seed=0):
    if isinstance(spec, dict):
        spec = ArchSpec(**spec)
    torch.manual_seed(seed)
    network = make_network(spec.arch_id, spec.num_outputs, spec.width)
    network.eval()
    return TrainedModel(spec, network, seed)


def parameter_hash(network):
    h = hashlib.sha256()
    for name, t in sorted(network.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def as_image_array(images):
    """Normalize a DatasetSplit, list of images/LabeledExamples or array to (N,3,32,32) float32."""
    if isinstance(images, DatasetSplit):
        return images.images
    if isinstance(images, np.ndarray):
        arr = images
    elif isinstance(images, torch.Tensor):
        arr = images.detach().cpu().numpy()
    else:
        images = list(images)
        if not images:
            return np.zeros((0, 3, 32, 32), np.float32)
        arr = np.stack([getattr(im, "image", im) for im in images])
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def _batched_forward(network, x, batch_size=256):
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(network(torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size]))))
    return torch.cat(outs).numpy() if outs else None


def predict(model, images, batch_size=256):
    """Returns ``(labels, logits)``; labels are the argmax of the logits, batch order preserved."""
    if not model.arch.is_classifier:
        raise TypeError("predict requires a classifier; got an autoencoder")
    x = as_image_array(images)
    if len(x) == 0:
        return np.zeros(0, np.int64), np.zeros((0, model.arch.num_outputs), np.float32)
    model.network.eval()
    logits = _batched_forward(model.network, x, batch_size)
    return logits.argmax(axis=1).astype(np.int64), logits


def reconstruct(model, pixels, batch_size=256):
    if model.arch.is_classifier:
        raise TypeError("reconstruct requires an autoencoder")
    x = as_image_array(pixels)
    model.network.eval()
    if len(x) == 0:
        return x.copy()
    return _batched_forward(model.network, x, batch_size)


def layer_ids(model):
    return [name for name, _ in model.network.named_modules() if name]


def extract_features(model, layer_id, images, batch_size=256):
    """Flattened activations of ``layer_id`` for each image, one row per image."""
    if layer_id is None:
        layer_id = DEFAULT_FEATURE_LAYER[model.arch.arch_id]
    modules = dict(model.network.named_modules())
    if layer_id not in modules or not layer_id:
        raise ConfigError(f"unknown layer {layer_id!r}; valid layers: {', '.join(layer_ids(model))}",
                          key_path="layer_id")
    captured = []
    handle = modules[layer_id].register_forward_hook(
        lambda _m, _i, out: captured.append(out.detach().flatten(1).clone()))
    try:
        x = as_image_array(images)
        model.network.eval()
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                model.network(torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size])))
    finally:
        handle.remove()
    if not captured:
        return FeatureMatrix(np.zeros((0, 0), np.float32), layer_id)
    values = torch.cat(captured).numpy()
    if not np.all(np.isfinite(values)):
        raise TrainingError(f"non-finite features at layer {layer_id}")
    return FeatureMatrix(values, layer_id)


def _as_xy(data, classifier):
    if isinstance(data, DatasetSplit):
        return data.images, data.labels
    x, y = data
    x = np.asarray(x, np.float32)
    y = np.asarray(y, np.int64 if classifier else np.float32)
    return x, y


class _LRPlateau:
    # multiply lr by `factor` once `patience` consecutive epochs fail to improve the eval loss
    def __init__(self, optimizer, patience, factor=0.1):
        self.optimizer, self.patience, self.factor = optimizer, patience, factor
        self.best, self.bad = math.inf, 0

    def step(self, loss):
        if loss < self.best:
            self.best, self.bad = loss, 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= self.factor
            self.bad = 0


def _evaluate(network, x, y, loss_fn, classifier, batch_size):
    network.eval()
    total, correct, preds = 0.0, 0, []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size]))
            yb = torch.from_numpy(np.ascontiguousarray(y[i:i + batch_size]))
            out = network(xb)
            total += loss_fn(out, yb).item() * len(xb)
            if classifier:
                p = out.argmax(1)
                correct += int((p == yb).sum())
                preds.append(p.numpy())
    n = max(len(x), 1)
    acc = correct / n if classifier else None
    return total / n, acc, (np.concatenate(preds) if preds else None)


def train(model, train_data, eval_data=None, cfg=None, log_every=0):
    """Supervised training with Adam; returns a new TrainedModel with per-epoch history.

    ``train_data``/``eval_data`` are DatasetSplits or ``(inputs, targets)`` pairs
    (autoencoders take image targets). Early stopping restores the weights
    with the best eval loss; the optional LR schedule cuts the rate by 10x
    after ceil(patience / 2) epochs without eval-loss improvement.
    """
    cfg = cfg or TrainConfig()
    if isinstance(cfg, dict):
        cfg = TrainConfig(**cfg)
    classifier = model.arch.is_classifier
    if classifier and cfg.loss != "cross_entropy":
        raise ValidationError("classifiers train with cross_entropy")
    if not classifier and cfg.loss != "mse":
        raise ValidationError("autoencoders train with mse")
    x, y = _as_xy(train_data, classifier)
    if len(x) == 0:
        raise ValidationError("empty training set")
    ex, ey = _as_xy(eval_data, classifier) if eval_data is not None else (None, None)
    if classifier:
        for name, labels in (("train", y), ("eval", ey)):
            if labels is not None and len(labels) and (labels.min() < 0 or labels.max() >= model.arch.num_outputs):
                raise ValidationError(f"{name} labels outside [0, {model.arch.num_outputs})")

    network = copy.deepcopy(model.network)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.CrossEntropyLoss() if classifier else nn.MSELoss()
    patience = cfg.early_stopping_patience
    scheduler = _LRPlateau(optimizer, math.ceil((patience or 5) / 2)) if cfg.lr_schedule_on_eval_loss else None
    best_loss, best_state, stale = math.inf, None, 0
    history = []
    binary = classifier and model.arch.num_outputs == 2

    for epoch in range(cfg.epochs):
        network.train()
        perm = torch.randperm(len(x), generator=gen).numpy()
        run_loss, run_correct, seen = 0.0, 0, 0
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) == 1 and len(x) > 1:
                continue  # batch-norm needs more than one sample per batch
            xb = torch.from_numpy(x[idx])
            yb = torch.from_numpy(y[idx])
            optimizer.zero_grad()
            out = network(xb)
            loss = loss_fn(out, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch + 1}, batch {i // cfg.batch_size}")
            loss.backward()
            optimizer.step()
            run_loss += loss.item() * len(idx)
            seen += len(idx)
            if classifier:
                run_correct += int((out.argmax(1) == yb).sum())
        rec = {
            "epoch": epoch + 1,
            "train_loss": run_loss / max(seen, 1),
            "train_acc": run_correct / max(seen, 1) if classifier else None,
            "lr": optimizer.param_groups[0]["lr"],
        }
        if ex is not None and len(ex):
            eval_loss, eval_acc, preds = _evaluate(network, ex, ey, loss_fn, classifier, cfg.batch_size)
            rec.update(eval_loss=eval_loss, eval_acc=eval_acc)
            if binary:
                rec["precision"], rec["recall"], rec["f1"] = binary_metrics(ey, preds)
        else:
            rec.update(eval_loss=None, eval_acc=None)
        history.append(rec)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d: %s", epoch + 1, {k: round(v, 4) for k, v in rec.items() if k != "epoch" and v is not None})

        if ex is None or not len(ex):
            continue
        if scheduler is not None:
            scheduler.step(rec["eval_loss"])
        if patience is not None:
            if rec["eval_loss"] < best_loss:
                best_loss, stale = rec["eval_loss"], 0
                best_state = copy.deepcopy(network.state_dict())
            else:
                stale += 1
                if stale >= patience:
                    log.info("early stopping after epoch %d", epoch + 1)
                    break

    if best_state is not None:
        network.load_state_dict(best_state)
    network.eval()
    return TrainedModel(model.arch, network, model.seed, cfg, history)


def save_checkpoint(model, path, extra=None):
    payload = {
        "format": "triggerguard-checkpoint/1",
        "arch": asdict(model.arch),
        "seed": model.seed,
        "config": model.config.to_dict() if model.config else None,
        "config_hash": model.config.config_hash() if model.config else None,
        "history": model.history,
        "state_dict": model.network.state_dict(),
        "parameter_hash": model.parameter_hash(),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return payload["parameter_hash"]


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "triggerguard-checkpoint/1":
        raise ValidationError(f"{path} is not a triggerguard checkpoint")
    model = build_model(ArchSpec(**payload["arch"]), payload["seed"])
    model.network.load_state_dict(payload["state_dict"])
    model.network.eval()
    model.config = TrainConfig(**payload["config"]) if payload["config"] else None
    model.history = payload["history"]
    return model
