"""Wrapper against out-of-distribution triggers.

A binary detector separates task images (1) from a pool of foreign images (0);
inputs it rejects get a label drawn uniformly from the task's classes instead
of the inner model's answer.
"""

from dataclasses import dataclass, field

import numpy as np

from ..data import DatasetSplit
from ..errors import ConfigError
from ..models import ArchSpec, TrainConfig
from ._common import check_binary, train_binary_detector

IN_DIST, OOD = 1, 0
POOL_MODES = ("diluted", "excluded")


def _source_id(split):
    return split.name.split("-")[0]


def cinic_non_cifar(split):
    """The ImageNet-derived part of a CINIC-10 split (files not prefixed ``cifar10-``)."""
    mask = ~np.asarray(split.meta.get("from_cifar", np.zeros(len(split), bool)), bool)
    out = split.take(np.flatnonzero(mask), name=f"{split.name}-noncifar")
    out.sources = np.full(len(out), "cinic10_noncifar", dtype=object)
    return out


@dataclass
class NegativePool:
    sources: list
    mode: str = "diluted"
    excluded_ids: tuple = ()
    proportions: tuple = None  # per-source share of the negatives; equal shares by default
    seed: int = 0

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise ConfigError(f"unknown pool mode {self.mode!r}", key_path="pool.mode")
        if self.mode == "excluded":
            keep = [i for i, s in enumerate(self.sources) if _source_id(s) not in self.excluded_ids]
            self.sources = [self.sources[i] for i in keep]
            if self.proportions is not None:
                self.proportions = tuple(self.proportions[i] for i in keep)
        if not self.sources or all(len(s) == 0 for s in self.sources):
            raise ConfigError("negative pool is empty", key_path="pool.sources")
        if self.proportions is None:
            self.proportions = tuple([1.0 / len(self.sources)] * len(self.sources))
        if len(self.proportions) != len(self.sources) or min(self.proportions) < 0:
            raise ConfigError("pool proportions must be nonnegative, one per source", key_path="pool.proportions")
        total = float(sum(self.proportions))
        self.proportions = tuple(p / total for p in self.proportions)

    @property
    def source_ids(self):
        return [_source_id(s) for s in self.sources]

    def manifest(self):
        return {"sources": [s.name for s in self.sources], "mode": self.mode,
                "excluded_ids": list(self.excluded_ids), "proportions": list(self.proportions),
                "seed": self.seed, "sizes": [len(s) for s in self.sources]}


def _allocate(total, proportions):
    # largest-remainder rounding so the counts sum to `total`
    raw = np.asarray(proportions) * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts


def build_ood_training_set(in_dist, pool, balance=1.0):
    """Positives = ``in_dist`` (label 1); negatives = ``balance * |in_dist|`` pool draws (label 0).

    Negatives are re-expressed in the task's standardization; per-source
    counts follow ``pool.proportions``. Sampling is without replacement when
    a source is large enough.
    """
    if balance <= 0:
        raise ConfigError("balance must be > 0", key_path="balance")
    rng = np.random.default_rng(pool.seed)
    n_neg = int(round(balance * len(in_dist)))
    counts = _allocate(n_neg, pool.proportions)
    imgs, tags = [in_dist.images], [np.full(len(in_dist), _source_id(in_dist), dtype=object)]
    for src, c in zip(pool.sources, counts):
        if c == 0:
            continue
        if len(src) == 0:
            raise ConfigError(f"pool source {src.name} is empty", key_path="pool.sources")
        idx = rng.choice(len(src), size=c, replace=c > len(src))
        part = src.take(np.sort(idx)).restandardize(in_dist.stats)
        imgs.append(part.images)
        tags.append(part.sources)
    labels = np.concatenate([np.full(len(in_dist), IN_DIST), np.full(n_neg, OOD)])
    out = DatasetSplit(np.concatenate(imgs), labels, 2, f"ood-binary-{pool.mode}", pool.seed,
                       in_dist.stats, np.concatenate(tags))
    out.meta["pool"] = pool.manifest()
    return out


@dataclass
class OODDetector:
    model: object
    metrics: dict = field(default_factory=dict)
    pool_meta: dict = field(default_factory=dict)

    def predict_labels(self, images):
        return self.model.predict_labels(images)

    @property
    def history(self):
        return self.model.history


def default_ood_config(mode="diluted", seed=0):
    """Adam, lr 0.01, batch 128, 20 epochs; excluded mode adds early stopping (5) and the LR schedule."""
    if mode == "excluded":
        return TrainConfig(learning_rate=0.01, batch_size=128, epochs=20, early_stopping_patience=5,
                           lr_schedule_on_eval_loss=True, seed=seed)
    return TrainConfig(learning_rate=0.01, batch_size=128, epochs=20, seed=seed)


def train_ood_detector(binary, arch="mobilenet_v2", cfg=None, test_split=None, holdout_fraction=0.2, seed=0):
    check_binary(binary)
    arch = ArchSpec(arch, 2) if isinstance(arch, str) else arch
    if arch.arch_id not in ("mobilenet_v2", "resnet18", "vgg11", "vit_small"):
        raise ConfigError(f"unsupported OOD detector arch {arch.arch_id!r}", key_path="arch_id")
    pool_meta = binary.meta.get("pool", {})
    cfg = cfg or default_ood_config(pool_meta.get("mode", "diluted"), seed)
    model, metrics = train_binary_detector(binary, arch, cfg, test_split, holdout_fraction, seed)
    return OODDetector(model, metrics, pool_meta)


@dataclass
class OODWrappedModel:
    """Detector-gated inner model. The denial label stream is seeded; call ``reset`` to replay it.

    The stream is the only mutable state: concurrent callers need separate
    instances (or external serialization).
    """

    detector: OODDetector
    inner: object
    denial_seed: int = 0
    num_classes: int = None

    def __post_init__(self):
        if self.num_classes is None:
            self.num_classes = self.inner.arch.num_outputs
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.denial_seed)

    def random_labels(self, n):
        return self._rng.integers(0, self.num_classes, size=n)

    def predict_labels(self, images):
        return self.predict_with_route(images)[0]

    def predict_with_route(self, images):
        images = np.asarray(images, np.float32)
        if len(images) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        route = np.asarray(self.detector.predict_labels(images))
        out = np.empty(len(images), np.int64)
        passed = route == IN_DIST
        if passed.any():
            out[passed] = self.inner.predict_labels(images[passed])
        if (~passed).any():
            out[~passed] = self.random_labels(int((~passed).sum()))
        return out, route
