"""Staged experiment runner: data -> trigger -> mark -> defend -> eval.

Every stage writes into ``<output_dir>/cache/<stage>-<key>`` where the key
hashes the stage's config subtree, its seeds and the keys of its upstream
stages. A stage directory is built under a temporary name and renamed into
place, so a present directory is always complete.
"""

import dataclasses
import hashlib
import json
import logging
import os
import pickle
import shutil
import time
import uuid
from pathlib import Path

import numpy as np

from .. import __version__
from ..data import DATA_ROOT_ENV, DatasetSpec, load_dataset, subsample, write_sidecar
from ..defenses.adversarial import AdvDetector, AdvWrappedModel, Purifier, build_adv_pairs, train_adv_detector, \
    train_purifier
from ..defenses.ood import NegativePool, OODDetector, OODWrappedModel, build_ood_training_set, cinic_non_cifar, \
    train_ood_detector
from ..defenses.randomlabel import PCAProjection, PartialExtractor, RLWrappedModel, fit_pca, \
    kmeans_clusterer, kmeans_hungarian_accuracy, train_feature_svm, train_partial_extractor
from ..errors import MissingArtifactError
from ..models import ArchSpec, build_model, load_checkpoint, save_checkpoint, train
from ..watermarking import WatermarkedModel, key_generation, load_trigger_set, save_trigger_set, \
    watermark_marking, watermark_verification
from .config import ExperimentConfig
from .evaluation import eval_accuracy
from .report import EvalReport

log = logging.getLogger(__name__)

STAGES = ("data", "trigger", "mark", "defend", "eval")


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _asdict(x):
    return dataclasses.asdict(x) if dataclasses.is_dataclass(x) else x


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _read_json(path):
    return json.loads(Path(path).read_text())


class Pipeline:
    """Runs (or reloads) experiment stages for one config.

    With ``auto=True`` missing upstream stages are computed on demand; with
    ``auto=False`` only ``target`` may be computed and anything else missing
    raises MissingArtifactError naming the stage to run first.
    """

    def __init__(self, cfg, out_dir=None, force=(), auto=True, target=None):
        if isinstance(cfg, dict):
            cfg = ExperimentConfig.from_dict(cfg)
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.force = set(STAGES) if force is True else set(force or ())
        self.auto = auto
        self.target = target
        self.timing = {}
        self._memo = {}

    # -- keys and cache directories -------------------------------------------------------

    def stage_key(self, stage):
        cfg, s = self.cfg, self.cfg.seeds
        if stage == "data":
            parts = {"task": _asdict(cfg.task), "data": _asdict(cfg.data), "seed": s.data,
                     "root": self._root(cfg.task.dataset)}
        elif stage == "trigger":
            parts = {"trigger": _asdict(cfg.trigger), "seeds": [s.trigger, s.model],
                     "up": self.stage_key("data")}
        elif stage == "mark":
            parts = {"marking": _asdict(cfg.marking), "seed": s.model, "up": self.stage_key("trigger")}
        elif stage == "defend":
            kind = cfg.wrapper.kind
            sub = _asdict(getattr(cfg.wrapper, kind)) if kind != "none" else None
            parts = {"kind": kind, "wrapper": sub, "seeds": [s.model, s.data],
                     "up": [self.stage_key("data"), self.stage_key("mark")]}
        elif stage == "eval":
            parts = {"seed": s.denial, "up": [self.stage_key("defend"), self.stage_key("trigger")],
                     "version": __version__}
        else:
            raise KeyError(stage)
        return _hash(parts)[:16]

    def stage_dir(self, stage):
        return self.out / "cache" / f"{stage}-{self.stage_key(stage)}"

    def _run_stage(self, stage, compute, load):
        if stage in self._memo:
            return self._memo[stage]
        d = self.stage_dir(stage)
        if d.exists() and stage not in self.force:
            result = load(d)
        else:
            if not self.auto and stage != self.target:
                raise MissingArtifactError(stage, d)
            d.parent.mkdir(parents=True, exist_ok=True)
            tmp = d.parent / f".{d.name}.tmp-{uuid.uuid4().hex[:8]}"
            tmp.mkdir()
            t0 = time.time()
            try:
                compute(tmp)
            except BaseException:
                shutil.rmtree(tmp, ignore_errors=True)
                raise
            self.timing[stage] = time.time() - t0
            if d.exists():
                trash = d.parent / f".{d.name}.old-{uuid.uuid4().hex[:8]}"
                os.replace(d, trash)
                shutil.rmtree(trash, ignore_errors=True)
            os.replace(tmp, d)
            result = load(d)
        self._memo[stage] = result
        return result

    # -- datasets ---------------------------------------------------------------------------

    def _root(self, dataset_id):
        task = self.cfg.task
        env = os.environ.get(DATA_ROOT_ENV)
        base = env or task.data_root
        if dataset_id in task.dataset_roots and not env:
            return str(task.dataset_roots[dataset_id])
        return str({"svhn": Path(base) / "svhn", "cinic10": Path(base) / "cinic-10"}.get(dataset_id, Path(base)))

    def _load(self, dataset_id, split, stats=None):
        key = ("load", dataset_id, split, stats)
        if key not in self._memo:
            spec = DatasetSpec(dataset_id, split, self._root(dataset_id))
            self._memo[key] = load_dataset(spec, stats=stats)
        return self._memo[key]

    def _limit(self, split, limit, seed):
        if limit is None or limit >= len(split):
            return split
        rng = np.random.default_rng(seed)
        return split.take(np.sort(rng.choice(len(split), size=limit, replace=False)))

    def task_splits(self):
        if "splits" not in self._memo:
            t, s = self.cfg.task, self.cfg.seeds
            train_split = self._limit(self._load(t.dataset, "train"), t.train_limit, s.data)
            test_split = self._limit(self._load(t.dataset, "test"), t.test_limit, s.data + 1)
            self._memo["splits"] = (train_split, test_split)
        return self._memo["splits"]

    @property
    def stats(self):
        return self.task_splits()[0].stats

    def adversary_split(self):
        """The adversary's share of the training data (one third by default)."""
        train_split, _ = self.task_splits()
        return subsample(train_split, self.cfg.data.adversary_fraction, self.cfg.seeds.data)

    def detector_split(self):
        return self.adversary_split() if self.cfg.data.detector_data == "subsample" else self.task_splits()[0]

    # -- stages -----------------------------------------------------------------------------

    def data(self):
        def compute(d):
            train_split, test_split = self.task_splits()
            adv = self.adversary_split()
            write_sidecar(train_split, d / "train.json")
            write_sidecar(test_split, d / "test.json")
            _write_json(d / "data.json", {"train": train_split.metadata(), "test": test_split.metadata(),
                                          "adversary": adv.metadata(), "config": _asdict(self.cfg.task)})
        return self._run_stage("data", compute, lambda d: _read_json(d / "data.json"))

    def triggers(self):
        cfg, seeds = self.cfg.trigger, self.cfg.seeds

        def compute(d):
            self.data()
            train_split, test_split = self.task_splits()
            owner = None
            if cfg.type == "adversarial":
                arch = ArchSpec(cfg.owner_arch.arch_id, train_split.num_classes, cfg.owner_arch.width)
                owner = train(build_model(arch, seeds.model), train_split, test_split,
                              cfg.owner_train.to_train_config(seeds.model))
                save_checkpoint(owner, d / "owner.pt")
                triggers, vkey = key_generation("adversarial", cfg.n, seeds.trigger, source=train_split,
                                                surrogate=owner, epsilon=cfg.epsilon, threshold=cfg.threshold)
            elif cfg.type == "random_label":
                triggers, vkey = key_generation("random_label", cfg.n, seeds.trigger, source=train_split,
                                                threshold=cfg.threshold)
            else:
                foreign = self._load(cfg.foreign_dataset, "test", stats=train_split.stats)
                triggers, vkey = key_generation("ood", cfg.n, seeds.trigger, source=train_split, foreign=foreign,
                                                num_classes=train_split.num_classes, stats=train_split.stats,
                                                threshold=cfg.threshold)
            save_trigger_set(triggers, d / "triggers.zip", vkey)

        def load(d):
            triggers, vkey = load_trigger_set(d / "triggers.zip")
            owner = load_checkpoint(d / "owner.pt") if (d / "owner.pt").exists() else None
            return triggers, vkey, owner

        return self._run_stage("trigger", compute, load)

    def marked(self):
        cfg, seeds = self.cfg.marking, self.cfg.seeds

        def compute(d):
            triggers, _, _ = self.triggers()
            train_split, test_split = self.task_splits()
            if triggers.trigger_type != "ood" and triggers.source_indices is not None:
                keep = np.setdiff1d(np.arange(len(train_split)), triggers.source_indices)
                train_split = train_split.take(keep)
            arch = ArchSpec(cfg.arch.arch_id, train_split.num_classes, cfg.arch.width)
            wm = watermark_marking(arch, train_split, triggers, cfg.train.to_train_config(seeds.model),
                                   eval_split=test_split, trigger_repeat=cfg.trigger_repeat,
                                   model_seed=seeds.model)
            save_checkpoint(wm.model, d / "marked.pt", extra={"trigger_type": wm.trigger_type,
                                                              "marking_meta": wm.marking_meta})

        def load(d):
            import torch

            model = load_checkpoint(d / "marked.pt")
            extra = torch.load(d / "marked.pt", map_location="cpu", weights_only=False)["extra"]
            return WatermarkedModel(model, extra["trigger_type"], extra["marking_meta"])

        return self._run_stage("mark", compute, load)

    def wrapper(self):
        kind = self.cfg.wrapper.kind

        def compute(d):
            self.data()
            inner = self.marked()
            bundle = {"format": "triggerguard-wrapper/1", "kind": kind, "inner_hash": inner.parameter_hash(),
                      "config": _asdict(getattr(self.cfg.wrapper, kind)) if kind != "none" else None}
            if kind == "adversarial":
                bundle.update(self._train_adversarial(d))
            elif kind == "ood":
                bundle.update(self._train_ood(d))
            elif kind == "random_label":
                bundle.update(self._train_randomlabel(d))
            _write_json(d / "bundle.json", bundle)

        def load(d):
            return self._load_wrapper(d, self.marked())

        return self._run_stage("defend", compute, load)

    def _train_adversarial(self, d):
        wcfg, seed = self.cfg.wrapper.adversarial, self.cfg.seeds.model
        adv_split = self.detector_split()
        sarch = ArchSpec(wcfg.surrogate_arch.arch_id, adv_split.num_classes, wcfg.surrogate_arch.width)
        surrogate = train(build_model(sarch, seed), adv_split, None, wcfg.surrogate_train.to_train_config(seed))
        pairs = build_adv_pairs(adv_split, surrogate, wcfg.epsilon)
        darch = ArchSpec(wcfg.detector_arch.arch_id, 2, wcfg.detector_arch.width)
        detector = train_adv_detector(pairs.binary_split(), darch, wcfg.detector_train.to_train_config(seed),
                                      holdout_fraction=wcfg.holdout_fraction, seed=seed, epsilon=wcfg.epsilon)
        purifier = train_purifier(pairs, wcfg.purifier_train.to_train_config(seed, loss="mse"),
                                  wcfg.purifier_width, seed)
        save_checkpoint(surrogate, d / "surrogate.pt")
        save_checkpoint(detector.model, d / "detector.pt")
        save_checkpoint(purifier.autoencoder, d / "purifier.pt")
        return {"detector_metrics": detector.metrics, "detector_meta": detector.train_meta,
                "purifier_meta": purifier.train_meta, "stats": self.stats.to_dict()}

    def _pool_source(self, source_id):
        stats = self.stats
        if source_id == "cinic10_noncifar":
            split = cinic_non_cifar(self._load("cinic10", "train", stats=stats))
        else:
            split = self._load(source_id, "train", stats=stats)
        limit = self.cfg.wrapper.ood.pool_limit_per_source
        return self._limit(split, limit, self.cfg.seeds.data + 7)

    def _train_ood(self, d):
        wcfg, seed = self.cfg.wrapper.ood, self.cfg.seeds.model
        excluded = tuple(wcfg.excluded_ids) if wcfg.mode == "excluded" else ()
        sources = [self._pool_source(s) for s in wcfg.pool_sources if s.split("_")[0] not in excluded]
        pool = NegativePool(sources, wcfg.mode, excluded, seed=self.cfg.seeds.data)
        binary = build_ood_training_set(self.detector_split(), pool, wcfg.balance)
        section = wcfg.detector_train
        if wcfg.mode == "excluded" and section.early_stopping_patience is None:
            section = dataclasses.replace(section, early_stopping_patience=5, lr_schedule_on_eval_loss=True)
        arch = ArchSpec(wcfg.detector_arch.arch_id, 2, wcfg.detector_arch.width)
        detector = train_ood_detector(binary, arch, section.to_train_config(seed),
                                      holdout_fraction=wcfg.holdout_fraction, seed=seed)
        save_checkpoint(detector.model, d / "detector.pt")
        composition = {str(k): int(v) for k, v in zip(*np.unique(binary.sources[binary.labels == 0],
                                                                 return_counts=True))}
        return {"detector_metrics": detector.metrics, "pool": pool.manifest(), "negative_composition": composition}

    def _train_randomlabel(self, d):
        wcfg, seeds = self.cfg.wrapper.random_label, self.cfg.seeds
        if wcfg.train_dataset == "cinic10":
            src = subsample(self._load("cinic10", "train", stats=self.stats), self.cfg.data.adversary_fraction,
                            seeds.data)
        else:
            src = self.detector_split()
        extractor = train_partial_extractor(src, wcfg.extractor_train.to_train_config(seeds.model),
                                            wcfg.partial_epochs, width=wcfg.extractor_width, seed=seeds.model)
        fit_split = self._limit(src, wcfg.svm_max_examples, seeds.data + 3)
        feats = extractor.features(fit_split.images)
        projection = fit_pca(feats, wcfg.pca_variance)
        z = projection.transform(feats) if projection is not None else feats
        if wcfg.classifier == "svm":
            clf = train_feature_svm(z, fit_split.labels, c_grid=tuple(wcfg.c_grid), seed=seeds.data)
        else:
            clf = kmeans_clusterer(z, fit_split.labels, fit_split.num_classes, seed=seeds.data)
        study = None
        if wcfg.feature_study:
            study = {"feature_dim": int(feats.shape[1]), "n": int(len(feats))}
            base = train_feature_svm(feats, fit_split.labels, c_grid=tuple(wcfg.c_grid), seed=seeds.data)
            study["unprojected"] = {"accuracy": base.cv_accuracy, "std": base.cv_std}
            for frac in wcfg.study_fractions:
                p = fit_pca(feats, frac)
                c = train_feature_svm(p.transform(feats), fit_split.labels, c_grid=tuple(wcfg.c_grid),
                                      seed=seeds.data)
                study[f"pca_{frac}"] = {"accuracy": c.cv_accuracy, "std": c.cv_std,
                                        "n_components": p.n_components_kept}
            study["kmeans_hungarian_accuracy"] = kmeans_hungarian_accuracy(feats, fit_split.labels,
                                                                           fit_split.num_classes, seeds.data)
        save_checkpoint(extractor.model, d / "extractor.pt")
        with open(d / "classifier.pkl", "wb") as f:
            pickle.dump({"classifier": clf, "projection": projection}, f)
        return {"cv": {"accuracy": clf.cv_accuracy, "std": clf.cv_std, "kind": clf.kind, "params": clf.params},
                "extractor": {"hook": extractor.hook_layer, "epochs_trained": extractor.epochs_trained,
                              "feature_dim": extractor.feature_dim, "train_dataset": wcfg.train_dataset},
                "pca": None if projection is None else {"n_components": projection.n_components_kept,
                                                        "variance_fraction": projection.variance_fraction_requested},
                "feature_study": study}

    def _load_wrapper(self, d, inner):
        bundle = _read_json(d / "bundle.json")
        kind = bundle["kind"]
        models = {}
        if kind == "adversarial":
            det = load_checkpoint(d / "detector.pt")
            ae = load_checkpoint(d / "purifier.pt")
            models = {"detector": det, "purifier": ae, "surrogate": load_checkpoint(d / "surrogate.pt")}
            wrapped = AdvWrappedModel(AdvDetector(det, bundle["detector_metrics"], bundle["detector_meta"]),
                                      Purifier(ae, self.stats, bundle["purifier_meta"]), inner)
        elif kind == "ood":
            det = load_checkpoint(d / "detector.pt")
            models = {"detector": det}
            wrapped = OODWrappedModel(OODDetector(det, bundle["detector_metrics"], bundle["pool"]), inner,
                                      self.cfg.seeds.denial)
        elif kind == "random_label":
            ext = load_checkpoint(d / "extractor.pt")
            with open(d / "classifier.pkl", "rb") as f:
                parts = pickle.load(f)
            models = {"extractor": ext}
            info = bundle["extractor"]
            wrapped = RLWrappedModel(PartialExtractor(ext, info["hook"], info["epochs_trained"],
                                                      feature_dim=info["feature_dim"]),
                                     parts["classifier"], inner, parts["projection"],
                                     self.cfg.wrapper.random_label.policy)
        else:
            wrapped = inner
        return wrapped, bundle, models

    def _wrapper_label(self):
        w = self.cfg.wrapper
        if w.kind == "adversarial":
            return f"Wrapper Model - {w.adversarial.detector_arch.arch_id}"
        if w.kind == "ood":
            return f"Wrapper ({w.ood.detector_arch.arch_id}) - {w.ood.mode} {self.cfg.trigger.foreign_dataset}"
        if w.kind == "random_label":
            suffix = "" if w.random_label.pca_variance is None else f" PCA {w.random_label.pca_variance}"
            return f"Wrapper Model - {w.random_label.train_dataset}{suffix}"
        return "Unwrapped"

    def evaluate(self):
        def compute(d):
            triggers, vkey, owner = self.triggers()
            inner = self.marked()
            wrapped, bundle, models = self.wrapper()
            _, test_split = self.task_splits()
            task, kind, ttype = self.cfg.task.dataset, self.cfg.wrapper.kind, triggers.trigger_type
            inner_hash = inner.parameter_hash()
            histories = {"marking": inner.model.history}
            if owner is not None:
                histories["owner"] = owner.history
            checkpoints = {"marked": inner_hash}
            if owner is not None:
                checkpoints["owner"] = owner.parameter_hash()
            for name, m in models.items():
                checkpoints[name] = m.parameter_hash()
                histories[name] = m.history
            bit, wm_acc = watermark_verification(inner, triggers, vkey)
            baseline = EvalReport("Original Watermarked Model", task, ttype, "none",
                                  eval_accuracy(inner, test_split), wm_acc, bit, vkey.threshold,
                                  len(test_split), len(triggers), config_hash=self.cfg.config_hash(),
                                  checkpoints={"evaluated": inner_hash})
            if hasattr(wrapped, "reset"):
                wrapped.reset()
            wbit, wwm = watermark_verification(wrapped, triggers, vkey)
            report = EvalReport(
                self._wrapper_label(), task, ttype, kind, eval_accuracy(wrapped, test_split), wwm, wbit,
                vkey.threshold, len(test_split), len(triggers),
                detector=bundle.get("detector_metrics"), cv=bundle.get("cv"),
                config_hash=self.cfg.config_hash(),
                checkpoints={"evaluated": _hash(checkpoints)[:32], **checkpoints},
                histories=histories,
                extras={k: bundle[k] for k in ("pool", "negative_composition", "purifier_meta", "pca",
                                               "feature_study", "extractor") if bundle.get(k) is not None},
                baseline=baseline,
            )
            report.save(d / "report.json")

        report = self._run_stage("eval", compute, lambda d: EvalReport.load(d / "report.json"))
        report.timing = dict(self.timing)
        return report

    def run_stage(self, stage):
        return {"data": self.data, "trigger": self.triggers, "mark": self.marked, "defend": self.wrapper,
                "eval": self.evaluate}[stage]()


def run_experiment(cfg, out_dir=None, force=False):
    """Run every stage (reusing cached ones unless ``force``) and return the EvalReport."""
    return Pipeline(cfg, out_dir, force=force, auto=True).evaluate()


def revalidate(cfg, out_dir=None):
    """Recompute a persisted report's accuracies from its checkpoints; returns (stored, recomputed)."""
    p = Pipeline(cfg, out_dir, auto=False, target=None)
    stored = EvalReport.load(p.stage_dir("eval") / "report.json")
    triggers, vkey, _ = p.triggers()
    inner = p.marked()
    wrapped, _, _ = p.wrapper()
    _, test_split = p.task_splits()
    recomputed = {
        "baseline_test": eval_accuracy(inner, test_split),
        "baseline_wm": watermark_verification(inner, triggers, vkey)[1],
        "wrapped_test": eval_accuracy(wrapped, test_split),
    }
    if hasattr(wrapped, "reset"):
        wrapped.reset()
    recomputed["wrapped_wm"] = watermark_verification(wrapped, triggers, vkey)[1]
    stored_vals = {"baseline_test": stored.baseline.test_accuracy, "baseline_wm": stored.baseline.watermark_accuracy,
                   "wrapped_test": stored.test_accuracy, "wrapped_wm": stored.watermark_accuracy}
    return stored_vals, recomputed


def provenance_record(cfg, subcommand, argv, status, stage_key=None, error=None):
    return {
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "subcommand": subcommand,
        "argv": list(argv),
        "tool_version": __version__,
        "config_hash": cfg.config_hash() if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "seeds": _asdict(cfg.seeds) if cfg else None,
        "stage_key": stage_key,
        "status": status,
        "error": error,
    }
