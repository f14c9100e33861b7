"""Wrapper against adversarial-example triggers: a clean/adversarial detector
routes flagged inputs through an autoencoder purifier before the inner model."""

import logging
from dataclasses import dataclass, field

import numpy as np

from ..data import DatasetSplit
from ..errors import ValidationError
from ..models import ArchSpec, TrainConfig, build_model, reconstruct, train
from ..watermarking import fgsm_perturb
from ._common import check_binary, train_binary_detector

log = logging.getLogger(__name__)

CLEAN, ADVERSARIAL = 1, 0


@dataclass
class AdvPairs:
    clean: np.ndarray  # standardized
    adversarial: np.ndarray  # standardized, index-aligned with clean
    labels: np.ndarray  # task labels of the clean sources
    stats: object
    epsilon: float

    def __len__(self):
        return len(self.clean)

    def binary_split(self):
        """Clean images labeled 1 followed by their adversarial copies labeled 0."""
        n = len(self)
        return DatasetSplit(np.concatenate([self.clean, self.adversarial]),
                            np.concatenate([np.full(n, CLEAN), np.full(n, ADVERSARIAL)]),
                            2, "adv-binary", 0, self.stats,
                            np.array(["clean"] * n + ["adversarial"] * n, dtype=object))

    def pixel_pairs(self):
        """(adversarial, clean) in [0, 1] pixel space, the purifier's training pairs."""
        return self.stats.invert(self.adversarial), self.stats.invert(self.clean)

    def take(self, idx):
        return AdvPairs(self.clean[idx], self.adversarial[idx], self.labels[idx], self.stats, self.epsilon)


def build_adv_pairs(clean, surrogate, epsilon):
    """FGSM counterpart (against ``surrogate``) for every image of ``clean``."""
    if epsilon == 0:
        log.warning("epsilon=0: adversarial copies equal the clean images; the detection task is degenerate")
    adv = fgsm_perturb(surrogate, clean.images, clean.labels, epsilon, clean.stats)
    return AdvPairs(clean.images.copy(), adv, clean.labels.copy(), clean.stats, float(epsilon))


@dataclass
class AdvDetector:
    model: object
    metrics: dict = field(default_factory=dict)
    train_meta: dict = field(default_factory=dict)

    def is_clean(self, images):
        return self.model.predict_labels(images) == CLEAN

    def predict_labels(self, images):
        return self.model.predict_labels(images)


def train_adv_detector(binary, arch="resnet18", cfg=None, test_split=None, holdout_fraction=0.2, seed=0,
                       epsilon=None):
    """Binary clean(1)/adversarial(0) detector; defaults are Adam, lr 1e-3, batch 128, 20 epochs."""
    cfg = cfg or TrainConfig(learning_rate=0.001, batch_size=128, epochs=20, seed=seed)
    check_binary(binary, min_share=0.4)
    arch = ArchSpec(arch, 2) if isinstance(arch, str) else arch
    model, metrics = train_binary_detector(binary, arch, cfg, test_split, holdout_fraction, seed)
    return AdvDetector(model, metrics, {"epsilon": epsilon, "arch": arch.arch_id})


@dataclass
class Purifier:
    autoencoder: object
    stats: object
    train_meta: dict = field(default_factory=dict)

    def purify(self, images):
        """Standardized images in, standardized reconstructions (of valid [0,1] pixels) out."""
        images = np.asarray(images, np.float32)
        if len(images) == 0:
            return images.copy()
        return self.stats.apply(reconstruct(self.autoencoder, self.stats.invert(images)))


def mse(a, b):
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def train_purifier(pairs, cfg=None, width=1.0, seed=0, holdout_fraction=0.1):
    """Autoencoder mapping adversarial pixels to their clean originals (MSE)."""
    if len(pairs) == 0:
        raise ValidationError("purifier needs a nonempty paired set")
    cfg = cfg or TrainConfig(loss="mse", learning_rate=0.001, batch_size=128, epochs=20, seed=seed)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pairs))
    k = int(round(holdout_fraction * len(pairs))) if len(pairs) > 1 else 0
    train_pairs, held = pairs.take(np.sort(perm[k:])), pairs.take(np.sort(perm[:k])) if k else None
    ae = build_model(ArchSpec("autoencoder", width=width), seed)
    ae = train(ae, train_pairs.pixel_pairs(), held.pixel_pairs() if held else None, cfg)
    meta = {"width": width}
    if held is not None:
        adv_px, clean_px = held.pixel_pairs()
        meta["heldout_reconstruction_mse"] = mse(reconstruct(ae, adv_px), clean_px)
        meta["heldout_perturbation_mse"] = mse(adv_px, clean_px)
    return Purifier(ae, pairs.stats, meta)


@dataclass
class AdvWrappedModel:
    detector: AdvDetector
    purifier: Purifier
    inner: object

    @property
    def num_classes(self):
        return self.inner.arch.num_outputs

    def predict_labels(self, images):
        return self.predict_with_route(images)[0]

    def predict_with_route(self, images):
        """Labels plus the detector's verdict (1 = passed through, 0 = purified) per image."""
        images = np.asarray(images, np.float32)
        if len(images) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        route = self.detector.predict_labels(images)
        x = images.copy()
        flagged = route == ADVERSARIAL
        if flagged.any():
            x[flagged] = self.purifier.purify(images[flagged])
        return np.asarray(self.inner.predict_labels(x), np.int64), route
