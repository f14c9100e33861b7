"""Dataset ingestion, standardization and subsampling.

Images are held as float32 arrays of shape (N, 3, 32, 32). A split stores them
*standardized* with the per-channel statistics of its task's training split;
``Standardization`` converts between that space and [0, 1] pixel space.

Supported on-disk layouts (under a user supplied root directory):

* cifar10  -- ``cifar-10-batches-py/{data_batch_1..5,test_batch}`` (python pickles)
* cifar100 -- ``cifar-100-python/{train,test}`` (python pickles, fine labels)
* svhn     -- ``{train,test}_32x32.mat`` (label 10 is digit 0)
* cinic10  -- ``{train,valid,test}/<class name>/*.png``
"""

import functools
import hashlib
import json
import logging
import math
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

DATASET_IDS = ("cifar10", "cifar100", "cinic10", "svhn")
SPLITS = ("train", "test")
IMAGE_SHAPE = (3, 32, 32)

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "cinic10": 10, "svhn": 10}

DATA_ROOT_ENV = "TRIGGERGUARD_DATA_ROOT"
# meta entries holding one value per example; `take` subsets them
PER_EXAMPLE_META = ("from_cifar",)


@dataclass(frozen=True)
class Standardization:
    mean: tuple
    std: tuple

    def _arrays(self):
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, 3, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(1, 3, 1, 1)
        return mean, std

    def apply(self, pixels):
        """[0, 1] pixels -> standardized values. Accepts (3,H,W) or (N,3,H,W)."""
        pixels = np.asarray(pixels, dtype=np.float32)
        mean, std = self._arrays()
        out = (pixels.reshape((-1,) + pixels.shape[-3:]) - mean) / std
        return out.reshape(pixels.shape).astype(np.float32)

    def invert(self, images):
        images = np.asarray(images, dtype=np.float32)
        mean, std = self._arrays()
        out = images.reshape((-1,) + images.shape[-3:]) * std + mean
        return out.reshape(images.shape).astype(np.float32)

    def bounds(self):
        """Standardized images of [0,1] pixels lie within these per-channel (low, high) arrays."""
        mean, std = self._arrays()
        return (0.0 - mean) / std, (1.0 - mean) / std

    def to_dict(self):
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(m) for m in d["mean"]), tuple(float(s) for s in d["std"]))

    @classmethod
    def fit(cls, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        mean = pixels.mean(axis=(0, 2, 3))
        std = pixels.std(axis=(0, 2, 3))
        std = np.where(std < 1e-8, 1.0, std)
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))


IDENTITY = Standardization((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    split: str = "train"
    root_path: str = "."

    def __post_init__(self):
        if self.dataset_id not in DATASET_IDS:
            raise ConfigError(f"unknown dataset_id {self.dataset_id!r}; expected one of {DATASET_IDS}",
                              key_path="dataset_id")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}; expected one of {SPLITS}", key_path="split")


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int


@dataclass
class DatasetSplit:
    """An ordered, labeled set of standardized images.

    ``sources`` optionally tags each example with the dataset it came from
    (used by mixed pools such as OOD negatives).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    source_seed: int = 0
    stats: Standardization = IDENTITY
    sources: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise ValueError(f"images must have shape (N, 3, 32, 32), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if self.sources is None:
            self.sources = np.full(len(self.labels), self.name, dtype=object)
        else:
            self.sources = np.asarray(self.sources, dtype=object)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledExample(self.images[i], int(self.labels[i]))

    @property
    def examples(self):
        return [self[i] for i in range(len(self))]

    def pixels(self):
        return self.stats.invert(self.images)

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        meta = dict(self.meta)
        for key in PER_EXAMPLE_META:
            if key in meta:
                meta[key] = [meta[key][i] for i in indices]
        return DatasetSplit(self.images[indices], self.labels[indices], self.num_classes,
                            name or self.name, self.source_seed, self.stats,
                            self.sources[indices], meta)

    def restandardize(self, stats):
        """Same images expressed in another standardization (e.g. a foreign task's)."""
        images = stats.apply(self.pixels()) if stats != self.stats else self.images
        return DatasetSplit(images, self.labels, self.num_classes, self.name,
                            self.source_seed, stats, self.sources, dict(self.meta))

    def relabel(self, labels, num_classes=None):
        return DatasetSplit(self.images, labels, num_classes or self.num_classes, self.name,
                            self.source_seed, self.stats, self.sources, dict(self.meta))

    def checksum(self):
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def metadata(self):
        return {
            "name": self.name,
            "num_examples": len(self),
            "num_classes": self.num_classes,
            "source_seed": self.source_seed,
            "checksum": self.checksum(),
            "standardization": self.stats.to_dict(),
            **self.meta,
        }


def concat(splits, name, num_classes=None):
    stats = splits[0].stats
    if any(s.stats != stats for s in splits):
        raise ValueError("cannot concatenate splits with different standardization")
    return DatasetSplit(
        np.concatenate([s.images for s in splits]),
        np.concatenate([s.labels for s in splits]),
        num_classes or max(s.num_classes for s in splits),
        name, splits[0].source_seed, stats,
        np.concatenate([s.sources for s in splits]),
    )


# -- raw readers: return (uint8 pixels NHWC, labels, file list) -------------------------

def _unpickle(path):
    try:
        with open(path, "rb") as f:
            return pickle.load(f, encoding="bytes")
    except FileNotFoundError:
        raise IngestionError("missing dataset file", path) from None
    except Exception as e:
        raise IngestionError(f"corrupt dataset file: {e}", path) from e


def _from_cifar_rows(data, path):
    data = np.asarray(data, dtype=np.uint8)
    if data.ndim != 2 or data.shape[1] != 3072:
        raise IngestionError(f"unexpected CIFAR array shape {data.shape}", path)
    return data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)


def _read_cifar10(root, split):
    base = Path(root) / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys, files = [], [], []
    for n in names:
        path = base / n
        d = _unpickle(path)
        try:
            xs.append(_from_cifar_rows(d[b"data"], path))
            ys.append(np.asarray(d[b"labels"], dtype=np.int64))
        except KeyError as e:
            raise IngestionError(f"missing key {e}", path) from None
        files.append(path)
    return np.concatenate(xs), np.concatenate(ys), files


def _read_cifar100(root, split):
    path = Path(root) / "cifar-100-python" / split
    d = _unpickle(path)
    try:
        return _from_cifar_rows(d[b"data"], path), np.asarray(d[b"fine_labels"], dtype=np.int64), [path]
    except KeyError as e:
        raise IngestionError(f"missing key {e}", path) from None


def _read_svhn(root, split):
    import scipy.io

    path = Path(root) / f"{split}_32x32.mat"
    if not path.exists():
        raise IngestionError("missing dataset file", path)
    try:
        mat = scipy.io.loadmat(path)
        x = np.asarray(mat["X"], dtype=np.uint8).transpose(3, 0, 1, 2)
        y = np.asarray(mat["y"], dtype=np.int64).reshape(-1) % 10
    except Exception as e:
        raise IngestionError(f"corrupt dataset file: {e}", path) from e
    return x, y, [path]


def _read_cinic10(root, split):
    from PIL import Image

    base = Path(root) / split
    if not base.is_dir():
        raise IngestionError("missing dataset directory", base)
    xs, ys, files = [], [], []
    for label, cls in enumerate(CIFAR10_CLASSES):
        cdir = base / cls
        if not cdir.is_dir():
            raise IngestionError("missing class directory", cdir)
        for path in sorted(cdir.glob("*.png")):
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    if im.size != (32, 32):
                        im = im.resize((32, 32), Image.BILINEAR)
                    xs.append(np.asarray(im, dtype=np.uint8))
            except Exception as e:
                raise IngestionError(f"corrupt image: {e}", path) from e
            ys.append(label)
            files.append(path)
    if not xs:
        raise IngestionError("no images found", base)
    return np.stack(xs), np.asarray(ys, dtype=np.int64), files


_READERS = {"cifar10": _read_cifar10, "cifar100": _read_cifar100, "svhn": _read_svhn, "cinic10": _read_cinic10}


def _file_checksums(files):
    out = {}
    for p in files:
        h = hashlib.sha256()
        if Path(p).is_file():
            with open(p, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    h.update(chunk)
        out[str(p)] = h.hexdigest()
    return out


@functools.lru_cache(maxsize=16)
def _read_raw(dataset_id, root, split):
    x, y, files = _READERS[dataset_id](root, split)
    return x, y, tuple(str(f) for f in files)


@functools.lru_cache(maxsize=16)
def training_stats(dataset_id, root):
    """Per-channel statistics of the *training* split of a dataset."""
    x, _, _ = _read_raw(dataset_id, str(root), "train")
    pixels = x.astype(np.float32) / 255.0
    mean = pixels.mean(axis=(0, 1, 2), dtype=np.float64)
    std = pixels.std(axis=(0, 1, 2), dtype=np.float64)
    return Standardization(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def load_dataset(spec, stats=None, sidecar_dir=None):
    """Load one split of a dataset in canonical class order.

    Standardization defaults to the dataset's own training-split statistics;
    pass ``stats`` to express the images in another task's space.
    """
    if isinstance(spec, dict):
        spec = DatasetSpec(**spec)
    root = str(spec.root_path)
    x, y, files = _read_raw(spec.dataset_id, root, spec.split)
    if stats is None:
        stats = training_stats(spec.dataset_id, root)
    images = stats.apply(x.transpose(0, 3, 1, 2).astype(np.float32) / 255.0)
    split = DatasetSplit(images, y, NUM_CLASSES[spec.dataset_id], f"{spec.dataset_id}-{spec.split}",
                         source_seed=0, stats=stats,
                         sources=np.full(len(y), spec.dataset_id, dtype=object))
    if spec.dataset_id == "cinic10":
        split.meta["from_cifar"] = [Path(f).name.startswith("cifar10-") for f in files]
    if sidecar_dir is not None:
        write_sidecar(split, Path(sidecar_dir) / f"{split.name}.json", files=files)
    log.info("loaded %s: %d examples", split.name, len(split))
    return split


def write_sidecar(split, path, files=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {k: v for k, v in split.metadata().items() if k != "from_cifar"}
    meta["file_checksums"] = _file_checksums(files)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def subsample(split, fraction, seed):
    """Uniform sample of floor(fraction * |split|) examples without replacement.

    Source order is preserved among the chosen examples; class balance is not
    enforced.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}", key_path="fraction")
    k = math.floor(fraction * len(split) + 1e-9)
    if k < 1:
        raise ConfigError(f"fraction {fraction} of {len(split)} examples selects nothing", key_path="fraction")
    if k == len(split):
        return split
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(split), size=k, replace=False))
    out = split.take(idx, name=f"{split.name}-sub{fraction:.4g}")
    out.source_seed = seed
    return out
