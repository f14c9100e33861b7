"""Acceptance criteria, one test each, with a [PASS]/[FAIL] summary line.

Criteria 1-7a train full-size networks on the real corpora. They look for
them under $TRIGGERGUARD_DATA_ROOT and fail loudly when it is missing.
Set TRIGGERGUARD_ACCEPTANCE_OUT to keep (and reuse) their stage cache.
"""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy.stats import chisquare

from triggerguard.data import IDENTITY, DatasetSplit, subsample
from triggerguard.defenses import OODWrappedModel, fit_pca, hungarian_assignment
from triggerguard.defenses.ood import OODDetector
from triggerguard.harness import ExperimentConfig, run_experiment
from triggerguard.metrics import binary_metrics
from triggerguard.watermarking import TriggerSet, VerificationKey, fgsm_perturb, watermark_verification

from .conftest import ACCEPTANCE_LINES, data_available, tiny_config
from .test_defenses import Const
from .test_watermarking import STATS, linear_model

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(criterion, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {criterion} {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- full-scale runs --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    """EvalReports for every shipped config, or None without the real datasets."""
    root = data_available()
    if root is None:
        return None
    out = Path(os.environ.get("TRIGGERGUARD_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("acceptance"))
    reports = {}
    for name in ("adversarial", "ood_diluted", "ood_excluded", "random_label"):
        d = yaml.safe_load((CONFIGS / f"{name}.yaml").read_text())
        d["task"]["data_root"] = str(root)
        reports[name] = run_experiment(ExperimentConfig.from_dict(d), out)
    return reports


def _need(runs, criterion):
    if runs is None:
        record(criterion, False, "not run: real CIFAR-10/CIFAR-100/SVHN/CINIC-10 not found under "
                                 "$TRIGGERGUARD_DATA_ROOT")
    return runs


def test_criterion_1_marking(full_runs):
    runs = _need(full_runs, 1)
    base = runs["adversarial"].baseline
    minutes = runs["adversarial"].timing.get("mark")
    minutes = None if minutes is None else minutes / 60
    ok = base.verification_bit == 1 and base.watermark_accuracy == 1.0 and base.test_accuracy >= 0.80
    ok = ok and (minutes is None or minutes <= 120)
    runtime = "cached" if minutes is None else f"{minutes:.1f} min"
    record(1, ok, f"marked ResNet18: wm={base.watermark_accuracy:.4f} bit={base.verification_bit} "
                  f"test={base.test_accuracy:.4f} (need 1.0, 1, >=0.80) marking {runtime} (<=120)")


def test_criterion_2_adversarial_wrapper(full_runs):
    r = _need(full_runs, 2)["adversarial"]
    drop = r.baseline.test_accuracy - r.test_accuracy
    ok = r.watermark_accuracy <= 0.30 and abs(drop) <= 0.02 and (r.baseline.verification_bit, r.verification_bit) == (1, 0)
    record(2, ok, f"adversarial wrapper: wm={r.watermark_accuracy:.4f} (<=0.30) test drop={drop * 100:.2f} pts "
                  f"(within 2) bit {r.baseline.verification_bit}->{r.verification_bit}")


def test_criterion_3_ood_diluted(full_runs):
    r = _need(full_runs, 3)["ood_diluted"]
    drop = r.baseline.test_accuracy - r.test_accuracy
    ok = r.watermark_accuracy <= 0.30 and drop <= 0.10
    record(3, ok, f"OOD diluted: wm={r.watermark_accuracy:.4f} (<=0.30) test drop={drop * 100:.2f} pts (<=10)")


def test_criterion_4_ood_excluded(full_runs):
    runs = _need(full_runs, 4)
    ex, dil = runs["ood_excluded"], runs["ood_diluted"]
    same = ex.checkpoints["marked"] == dil.checkpoints["marked"] and ex.n_triggers == dil.n_triggers
    ok = same and ex.watermark_accuracy >= 0.60 and ex.watermark_accuracy > dil.watermark_accuracy
    record(4, ok, f"OOD excluded: wm={ex.watermark_accuracy:.4f} (>=0.60, > diluted {dil.watermark_accuracy:.4f}) "
                  f"same marked model={same}")


def test_criterion_5_random_label_wrapper(full_runs):
    r = _need(full_runs, 5)["random_label"]
    ok = r.watermark_accuracy <= 0.15 and r.test_accuracy >= 0.55
    record(5, ok, f"random-label wrapper: wm={r.watermark_accuracy:.4f} (<=0.15) test={r.test_accuracy:.4f} (>=0.55)")


def test_criterion_6_feature_svm(full_runs):
    study = _need(full_runs, 6)["random_label"].extras["feature_study"]
    raw, pca = study["unprojected"]["accuracy"], study["pca_0.95"]["accuracy"]
    ok = 0.73 <= raw <= 0.85 and pca >= raw - 0.01
    record(6, ok, f"feature SVM 5-fold CV: unprojected={raw:.4f} (in [0.73, 0.85]) PCA-0.95={pca:.4f} "
                  f"(>= {raw - 0.01:.4f})")


def test_criterion_7a_kmeans(full_runs):
    acc = _need(full_runs, "7a")["random_label"].extras["feature_study"]["kmeans_hungarian_accuracy"]
    record("7a", 0.55 <= acc <= 0.75, f"K-Means + Hungarian accuracy={acc:.4f} (in [0.55, 0.75])")


# -- no real data needed ----------------------------------------------------------------------

def test_criterion_7b_hungarian_vs_brute_force():
    r = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        k = int(r.integers(1, 7))
        m = r.integers(0, 50, size=(k, k))
        best = max(sum(m[i, p[i]] for i in range(k)) for p in itertools.permutations(range(k)))
        mapping = hungarian_assignment(m)
        if sorted(mapping.tolist()) != list(range(k)) or m[np.arange(k), mapping].sum() != best:
            mismatches += 1
    record("7b", mismatches == 0, f"Hungarian vs permutation brute force: {mismatches}/1000 mismatches (k<=6)")


def _eigen_count(x, frac):
    ev = np.clip(np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False, bias=True)))[::-1], 0, None)
    ratio = np.cumsum(ev) / ev.sum()
    return int(np.flatnonzero(ratio >= frac - 1e-12)[0]) + 1


def test_criterion_8_fast_properties():
    t0 = time.perf_counter()
    r = np.random.default_rng(8)
    failed = []

    # FGSM: eps=0 identity and L-inf bound
    model = linear_model()
    for _ in range(20):
        px = r.uniform(0, 1, (4, 3, 32, 32)).astype(np.float32)
        y = r.integers(0, 10, 4)
        x = STATS.apply(px)
        if not np.array_equal(fgsm_perturb(model, x, y, 0.0, STATS), x):
            failed.append("fgsm-identity")
        eps = float(r.uniform(0, 0.2))
        adv = STATS.invert(fgsm_perturb(model, x, y, eps, STATS))
        if np.abs(adv - px).max() > eps + 1e-5:
            failed.append("fgsm-bound")

    # verification threshold monotone in the threshold
    trig = TriggerSet(r.normal(size=(20, 3, 32, 32)).astype(np.float32), r.integers(0, 10, 20), "ood", 10)
    for _ in range(200):
        hits = int(r.integers(0, 21))
        preds = trig.assigned_labels.copy()
        preds[hits:] = (preds[hits:] + 1) % 10
        lo, hi = np.sort(r.uniform(0.01, 1.0, 2))
        b_lo, _ = watermark_verification(Const(lambda x: preds), trig, VerificationKey(trig.content_hash(), lo))
        b_hi, _ = watermark_verification(Const(lambda x: preds), trig, VerificationKey(trig.content_hash(), hi))
        if b_lo < b_hi:
            failed.append("threshold-monotone")

    # denial labels uniform
    wrapped = OODWrappedModel(OODDetector(Const(0, 2)), Const(3), denial_seed=1)
    counts = np.bincount(wrapped.predict_labels(np.zeros((10_000, 3, 32, 32), np.float32)), minlength=10)
    p_value = chisquare(counts).pvalue
    if p_value <= 0.01:
        failed.append("denial-uniform")

    # PCA component count vs eigen-scan
    for _ in range(50):
        d = int(r.integers(2, 20))
        x = r.normal(size=(60, d)) * np.geomspace(10, 0.1, d)
        frac = float(r.choice([0.5, 0.85, 0.9, 0.95, 0.99]))
        if fit_pca(x, frac).n_components_kept != _eigen_count(x, frac):
            failed.append("pca-count")

    # P/R/F1 vs confusion counts
    for _ in range(200):
        n = int(r.integers(1, 50))
        y, p = r.integers(0, 2, n), r.integers(0, 2, n)
        tp, fp, fn = int(np.sum((y == 1) & (p == 1))), int(np.sum((y == 0) & (p == 1))), int(np.sum((y == 1) & (p == 0)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        if not np.allclose(binary_metrics(y, p), (prec, rec, f1), atol=1e-12):
            failed.append("prf")

    # subsample determinism
    split = DatasetSplit(np.arange(300, dtype=np.float32)[:, None, None, None] * np.ones((1, 3, 32, 32), np.float32),
                         np.arange(300) % 10, 10, "s", stats=IDENTITY)
    for seed in range(20):
        a, b = subsample(split, 1 / 3, seed), subsample(split, 1 / 3, seed)
        if len(a) != 100 or not np.array_equal(a.images, b.images):
            failed.append("subsample")

    # config hash determinism
    for seed in range(20):
        d = {"trigger": {"n": seed + 1}, "seeds": {"model": seed}}
        shuffled = json.loads(json.dumps({"seeds": {"model": seed}, "trigger": {"n": seed + 1}}))
        if ExperimentConfig.from_dict(d).config_hash() != ExperimentConfig.from_dict(shuffled).config_hash():
            failed.append("config-hash")

    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60
    record(8, ok, f"fast-tier properties: {len(set(failed))} failing families {sorted(set(failed))} "
                  f"denial chi-square p={p_value:.3f} in {elapsed:.1f}s (<60s)")


@pytest.mark.slow
def test_criterion_9_rerun_determinism(fake_root, tmp_path):
    mismatched = []
    for kind, trigger in (("adversarial", "adversarial"), ("ood", "ood"), ("random_label", "random_label")):
        cfg = ExperimentConfig.from_dict(tiny_config(fake_root, tmp_path / "a", kind, trigger))
        first = run_experiment(cfg, tmp_path / f"{kind}-1")
        second = run_experiment(cfg, tmp_path / f"{kind}-2")
        if json.dumps(first.values(), sort_keys=True) != json.dumps(second.values(), sort_keys=True):
            mismatched.append(kind)
    record(9, not mismatched, f"rerun with identical config hash reproduces EvalReport values "
                              f"(3 wrappers, fresh output dirs); mismatched={mismatched}")
