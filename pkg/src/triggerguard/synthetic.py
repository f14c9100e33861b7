"""Procedural stand-in data.

Used by the demos and tests to exercise the pipeline without the real image
corpora. ``write_fake_datasets`` emits files in exactly the on-disk layouts the
loaders read, so the ingestion code path is the same one real data takes.
"""

from pathlib import Path

import numpy as np

from .data import CIFAR10_CLASSES, DatasetSplit, Standardization


def synthetic_pixels(n, num_classes=10, seed=0, template_seed=0, noise=0.08, style="blobs"):
    """Procedural 32x32 RGB images with class-dependent structure, in [0, 1].

    Each class owns a smooth random template; samples are shifted, rescaled,
    noisy copies. ``style='stripes'`` yields a visibly different distribution
    (oriented gratings) for out-of-distribution experiments.
    """
    trng = np.random.default_rng(template_seed)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32) / 32.0
    templates = []
    for _ in range(num_classes):
        if style == "stripes":
            theta, freq = trng.uniform(0, np.pi), trng.uniform(3, 8)
            phase = trng.uniform(0, 2 * np.pi, size=3)
            t = np.stack([0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + p)
                          for p in phase])
        else:
            t = np.zeros((3, 32, 32), np.float32)
            for _ in range(3):
                cy, cx = trng.uniform(0.2, 0.8, size=2)
                width = trng.uniform(0.08, 0.25)
                color = trng.uniform(0, 1, size=3).reshape(3, 1, 1)
                t += color * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            t = 0.15 + 0.7 * t / max(t.max(), 1e-6)
        templates.append(t.astype(np.float32))
    templates = np.stack(templates)
    labels = rng.integers(0, num_classes, size=n)
    shifts = rng.integers(-3, 4, size=(n, 2))
    gains = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1)).astype(np.float32)
    out = np.empty((n, 3, 32, 32), np.float32)
    for i in range(n):
        out[i] = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
    out = out * gains + rng.normal(0, noise, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0), labels.astype(np.int64)


def synthetic_split(n, num_classes=10, seed=0, template_seed=0, name="synthetic", stats=None, **kw):
    pixels, labels = synthetic_pixels(n, num_classes, seed, template_seed, **kw)
    stats = stats or Standardization.fit(pixels)
    return DatasetSplit(stats.apply(pixels), labels, num_classes, name, seed, stats)


def _u8_hwc(pixels):
    return np.round(pixels * 255).astype(np.uint8).transpose(0, 2, 3, 1)


def _write_pickle(path, obj):
    import pickle

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        pickle.dump(obj, f)


def write_fake_datasets(root, n_train=500, n_test=200, n_foreign=300, seed=0):
    """Write small procedural datasets under ``root`` in the canonical layouts.

    Layout matches what the pipeline resolves from a data root: CIFAR-10 and
    CIFAR-100 directly under it, SVHN in ``svhn/`` and CINIC-10 in ``cinic-10/``.
    The CINIC stand-in mixes files named ``cifar10-*`` (same generator as the
    CIFAR-10 stand-in) with ``n*`` files from a shifted generator.
    """
    from PIL import Image
    import scipy.io

    root = Path(root)
    x, y = synthetic_pixels(n_train + n_test, 10, seed, template_seed=1)
    rows = _u8_hwc(x).transpose(0, 3, 1, 2).reshape(len(x), -1)
    per = int(np.ceil(n_train / 5))
    for b in range(5):
        sl = slice(b * per, min((b + 1) * per, n_train))
        _write_pickle(root / "cifar-10-batches-py" / f"data_batch_{b + 1}",
                      {b"data": rows[sl], b"labels": y[sl].tolist()})
    _write_pickle(root / "cifar-10-batches-py" / "test_batch",
                  {b"data": rows[n_train:], b"labels": y[n_train:].tolist()})

    for i, split in enumerate(("train", "test")):
        x, y = synthetic_pixels(n_foreign, 100, seed + 10 + i, template_seed=2, style="stripes")
        _write_pickle(root / "cifar-100-python" / split,
                      {b"data": _u8_hwc(x).transpose(0, 3, 1, 2).reshape(len(x), -1), b"fine_labels": y.tolist()})

    (root / "svhn").mkdir(parents=True, exist_ok=True)
    for i, split in enumerate(("train", "test")):
        x, y = synthetic_pixels(n_foreign, 10, seed + 20 + i, template_seed=3, style="stripes", noise=0.15)
        y = np.where(y == 0, 10, y)
        scipy.io.savemat(root / "svhn" / f"{split}_32x32.mat",
                         {"X": _u8_hwc(x).transpose(1, 2, 3, 0), "y": y.reshape(-1, 1)})

    for i, split in enumerate(("train", "valid", "test")):
        half = n_foreign // 2
        xc, yc = synthetic_pixels(half, 10, seed + 30 + i, template_seed=1)
        xn, yn = synthetic_pixels(n_foreign - half, 10, seed + 40 + i, template_seed=4, noise=0.12)
        for prefix, xs, ys in (("cifar10-", xc, yc), ("n0", xn, yn)):
            for j, (img, lab) in enumerate(zip(_u8_hwc(xs), ys)):
                d = root / "cinic-10" / split / CIFAR10_CLASSES[lab]
                d.mkdir(parents=True, exist_ok=True)
                Image.fromarray(img).save(d / f"{prefix}{j:05d}.png")
    return root
