"""Backdoor watermarking: trigger-set key generation, marking and verification."""

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit, LabeledExample, Standardization, concat
from .errors import ConfigError, KeyMismatchError, TrainingError, ValidationError
from .models import ArchSpec, TrainConfig, build_model, train

TRIGGER_TYPES = ("adversarial", "ood", "random_label")
DEFAULT_EPSILON = 8 / 255
DEFAULT_THRESHOLD = 0.9
DEFAULT_TRIGGER_COUNT = 100


def fgsm_perturb(model, images, labels, epsilon, stats, batch_size=256):
    """One-step FGSM in [0, 1] pixel space.

    ``images`` are standardized with ``stats`` (a single LabeledExample is also
    accepted, in which case ``labels`` may be None). Returns standardized
    images of the same shape: clip(x + eps * sign(grad_x CE), 0, 1).
    """
    single = isinstance(images, LabeledExample)
    if single:
        labels = [images.label]
        images = images.image[None]
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels, np.int64)
    pixels = stats.invert(images)
    if epsilon == 0:
        out = images.copy()
        return out[0] if single else out
    mean = torch.tensor(stats.mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(stats.std, dtype=torch.float32).view(1, 3, 1, 1)
    network = model.network
    was_training = network.training
    network.eval()
    adv = np.empty_like(pixels)
    try:
        for i in range(0, len(pixels), batch_size):
            p = torch.from_numpy(pixels[i:i + batch_size]).requires_grad_(True)
            loss = F.cross_entropy(network((p - mean) / std), torch.from_numpy(labels[i:i + batch_size]),
                                   reduction="sum")
            (grad,) = torch.autograd.grad(loss, p)
            if not torch.all(torch.isfinite(grad)):
                raise TrainingError(f"non-finite input gradient in FGSM batch starting at {i}")
            adv[i:i + batch_size] = torch.clamp(p.detach() + epsilon * grad.sign(), 0.0, 1.0).numpy()
    finally:
        network.train(was_training)
    out = stats.apply(adv)
    return out[0] if single else out


@dataclass
class TriggerSet:
    """The secret marking key: trigger images (standardized) with their assigned labels."""

    images: np.ndarray
    assigned_labels: np.ndarray
    trigger_type: str
    num_classes: int
    gen_seed: int = 0
    true_labels: np.ndarray = None  # -1 where unknown / not in the task's label space
    stats: Standardization = None
    clean_pixels: np.ndarray = None  # adversarial only: unperturbed sources in [0, 1]
    source_indices: np.ndarray = None
    source_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float32)
        self.assigned_labels = np.asarray(self.assigned_labels, np.int64)
        if self.true_labels is None:
            self.true_labels = np.full(len(self.assigned_labels), -1, np.int64)
        self.true_labels = np.asarray(self.true_labels, np.int64)
        if self.trigger_type not in TRIGGER_TYPES:
            raise ConfigError(f"unknown trigger type {self.trigger_type!r}", key_path="trigger_type")
        if len(self.images) != len(self.assigned_labels):
            raise ValidationError("trigger images and labels differ in length")
        if len(self.assigned_labels) and (self.assigned_labels.min() < 0
                                          or self.assigned_labels.max() >= self.num_classes):
            raise ValidationError(f"assigned labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.assigned_labels)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(self.trigger_type.encode())
        h.update(str(self.num_classes).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.assigned_labels.tobytes())
        return h.hexdigest()

    def as_split(self, name="triggers"):
        return DatasetSplit(self.images, self.assigned_labels, self.num_classes, name,
                            self.gen_seed, self.stats or Standardization((0, 0, 0), (1, 1, 1)),
                            np.full(len(self), f"trigger:{self.trigger_type}", dtype=object))

    def manifest(self):
        return {
            "format": "triggerguard-triggers/1",
            "trigger_type": self.trigger_type,
            "num_classes": self.num_classes,
            "n": len(self),
            "gen_seed": self.gen_seed,
            "assigned_labels": self.assigned_labels.tolist(),
            "true_labels": self.true_labels.tolist(),
            "standardization": self.stats.to_dict() if self.stats else None,
            "source_meta": self.source_meta,
            "content_hash": self.content_hash(),
        }


@dataclass(frozen=True)
class VerificationKey:
    trigger_ref: str
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise ConfigError("threshold must lie in (0, 1]", key_path="threshold")


@dataclass
class WatermarkedModel:
    model: object
    trigger_type: str
    marking_meta: dict = field(default_factory=dict)

    @property
    def arch(self):
        return self.model.arch

    @property
    def network(self):
        return self.model.network

    def predict_labels(self, images):
        return self.model.predict_labels(images)

    def parameter_hash(self):
        return self.model.parameter_hash()


def _wrong_labels(rng, true_labels, num_classes):
    # uniform over the num_classes - 1 labels that differ from the true one
    offsets = rng.integers(1, num_classes, size=len(true_labels))
    return (np.asarray(true_labels) + offsets) % num_classes


def key_generation(kind, n=DEFAULT_TRIGGER_COUNT, seed=0, *, source=None, num_classes=None,
                   surrogate=None, epsilon=DEFAULT_EPSILON, foreign=None, stats=None,
                   threshold=DEFAULT_THRESHOLD):
    """Draw a trigger set and its verification key.

    adversarial  -- ``source`` clean split + ``surrogate`` classifier: FGSM images with wrong labels
    ood          -- ``foreign`` split: foreign images with labels uniform over the task's classes
    random_label -- ``source`` in-distribution split: real images with wrong labels
    """
    if kind not in TRIGGER_TYPES:
        raise ConfigError(f"unknown trigger type {kind!r}", key_path="trigger.type")
    rng = np.random.default_rng(seed)
    if kind == "ood":
        if foreign is None:
            raise ConfigError("ood triggers need a foreign split", key_path="trigger.foreign_dataset")
        if source is not None and foreign.name.split("-")[0] == source.name.split("-")[0]:
            raise ConfigError("foreign split must come from a different dataset than the task",
                              key_path="trigger.foreign_dataset")
        num_classes = num_classes or (source.num_classes if source is not None else None)
        if num_classes is None:
            raise ConfigError("num_classes is required for ood triggers", key_path="num_classes")
        pool = foreign
    else:
        if source is None:
            raise ConfigError(f"{kind} triggers need a source split", key_path="trigger.source")
        num_classes = num_classes or source.num_classes
        pool = source
    if n < 1 or n > len(pool):
        raise ValidationError(f"cannot draw {n} triggers from {len(pool)} source images")

    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    chosen = pool.take(idx)
    task_stats = stats or (source.stats if source is not None else chosen.stats)
    chosen = chosen.restandardize(task_stats)
    meta = {"source": pool.name, "n": n}
    clean_pixels = None
    if kind == "adversarial":
        if surrogate is None:
            raise ConfigError("adversarial triggers need a surrogate model", key_path="trigger.surrogate")
        clean_pixels = chosen.pixels()
        images = fgsm_perturb(surrogate, chosen.images, chosen.labels, epsilon, task_stats)
        true_labels = chosen.labels
        assigned = _wrong_labels(rng, true_labels, num_classes)
        meta["epsilon"] = float(epsilon)
    elif kind == "random_label":
        images, true_labels = chosen.images, chosen.labels
        assigned = _wrong_labels(rng, true_labels, num_classes)
    else:
        images = chosen.images
        true_labels = np.full(n, -1, np.int64)
        assigned = rng.integers(0, num_classes, size=n)
        meta["foreign_dataset"] = foreign.name
    triggers = TriggerSet(images, assigned, kind, num_classes, seed, true_labels, task_stats,
                          clean_pixels, idx, meta)
    return triggers, VerificationKey(triggers.content_hash(), threshold)


def watermark_marking(arch, train_split, triggers, cfg, eval_split=None, trigger_repeat=1,
                      model_seed=0, init=None):
    """Train a classifier on train ∪ triggers; every trigger item appears in every epoch.

    ``trigger_repeat`` oversamples the trigger items within each epoch. With
    ``init`` the given model is fine-tuned instead of training from scratch.
    """
    if isinstance(cfg, dict):
        cfg = TrainConfig(**cfg)
    if isinstance(arch, dict):
        arch = ArchSpec(**arch)
    if triggers.num_classes != arch.num_outputs:
        raise ValidationError("trigger label space does not match the classifier's output width")
    if trigger_repeat < 1:
        raise ValidationError("trigger_repeat must be >= 1")
    trig = triggers.as_split()
    if triggers.stats is not None and triggers.stats != train_split.stats:
        trig = trig.restandardize(train_split.stats)
    trig.stats = train_split.stats
    union = concat([train_split] + [trig] * trigger_repeat, "marking-union", train_split.num_classes)
    base = init if init is not None else build_model(arch, model_seed)
    marked = train(base, union, eval_split, cfg)
    return WatermarkedModel(marked, triggers.trigger_type,
                            {"trigger_repeat": trigger_repeat, "epochs": len(marked.history),
                             "trigger_ref": triggers.content_hash()})


def trigger_accuracy(model, triggers):
    preds = np.asarray(model.predict_labels(triggers.images))
    return float(np.mean(preds == triggers.assigned_labels)) if len(triggers) else 0.0


def watermark_verification(model, triggers, vkey):
    """Returns ``(bit, trigger_accuracy)``; bit is 1 iff accuracy >= the key's threshold."""
    if vkey.trigger_ref != triggers.content_hash():
        raise KeyMismatchError("verification key does not match the trigger set's content hash")
    acc = trigger_accuracy(model, triggers)
    return int(acc >= vkey.threshold), acc


def save_trigger_set(triggers, path, vkey=None):
    manifest = triggers.manifest()
    if vkey is not None:
        manifest["verification_key"] = {"trigger_ref": vkey.trigger_ref, "threshold": vkey.threshold}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, arr in (("images", triggers.images), ("clean_pixels", triggers.clean_pixels),
                          ("source_indices", triggers.source_indices)):
            if arr is not None:
                buf = io.BytesIO()
                np.save(buf, arr)
                zf.writestr(f"{name}.npy", buf.getvalue())
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_trigger_set(path):
    """Returns ``(TriggerSet, VerificationKey or None)``; the content hash is re-checked."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {n[:-4]: np.load(io.BytesIO(zf.read(n))) for n in zf.namelist() if n.endswith(".npy")}
    stats = manifest.get("standardization")
    triggers = TriggerSet(
        arrays["images"], manifest["assigned_labels"], manifest["trigger_type"], manifest["num_classes"],
        manifest["gen_seed"], manifest["true_labels"], Standardization.from_dict(stats) if stats else None,
        arrays.get("clean_pixels"), arrays.get("source_indices"), manifest["source_meta"],
    )
    if triggers.content_hash() != manifest["content_hash"]:
        raise KeyMismatchError(f"trigger archive {path} content hash mismatch")
    vk = manifest.get("verification_key")
    return triggers, (VerificationKey(vk["trigger_ref"], vk["threshold"]) if vk else None)
