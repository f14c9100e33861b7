import os
from pathlib import Path

import numpy as np
import pytest
import torch

from triggerguard.data import DATA_ROOT_ENV
from triggerguard.synthetic import write_fake_datasets

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

# captured before the autouse fixture below clears it
REAL_DATA_ROOT = os.environ.get(DATA_ROOT_ENV)

TINY_ARCH = {"arch_id": "vgg11", "width": 0.125}


def tiny_train(epochs, **kw):
    return {"epochs": epochs, "batch_size": 32, **kw}


def tiny_config(data_root, out_dir, kind="adversarial", trigger="adversarial", **extra):
    """Smallest experiment that still exercises every stage."""
    d = {
        "name": f"tiny-{kind}-{trigger}",
        "task": {"data_root": str(data_root), "train_limit": 240, "test_limit": 80},
        "trigger": {"type": trigger, "n": 12, "owner_arch": TINY_ARCH, "owner_train": tiny_train(2)},
        "marking": {"arch": TINY_ARCH, "train": tiny_train(3)},
        "wrapper": {
            "kind": kind,
            "adversarial": {"detector_arch": TINY_ARCH, "detector_train": tiny_train(2),
                            "surrogate_arch": TINY_ARCH, "surrogate_train": tiny_train(2),
                            "purifier_width": 0.25, "purifier_train": tiny_train(2)},
            "ood": {"detector_arch": TINY_ARCH, "detector_train": tiny_train(2), "pool_limit_per_source": 60},
            "random_label": {"extractor_width": 0.125, "extractor_train": tiny_train(6), "partial_epochs": 4},
        },
        "output_dir": str(out_dir),
    }
    for k, v in extra.items():
        d[k] = v
    return d


@pytest.fixture(scope="session")
def fake_root(tmp_path_factory):
    """Procedural datasets in the canonical on-disk layouts."""
    root = tmp_path_factory.mktemp("fake-data")
    return write_fake_datasets(root, n_train=400, n_test=160, n_foreign=200, seed=0)


@pytest.fixture(autouse=True)
def _no_env_root(monkeypatch):
    # keep a developer's real data root from leaking into unit tests
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def data_available():
    """Real corpora location, or None."""
    root = REAL_DATA_ROOT
    if root and (Path(root) / "cifar-10-batches-py" / "test_batch").exists():
        return Path(root)
    return None
