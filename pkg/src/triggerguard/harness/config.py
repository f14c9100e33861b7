"""Experiment configuration: a typed tree of dataclasses with a canonical,
hashable JSON form. Files may be JSON or YAML."""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..errors import ConfigError
from ..models import TrainConfig


@dataclass
class TaskConfig:
    dataset: str = "cifar10"
    data_root: str = "data"
    # per-dataset root overrides; defaults are <data_root>, <data_root>/svhn, <data_root>/cinic-10
    dataset_roots: dict = field(default_factory=dict)
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None


@dataclass
class DataConfig:
    adversary_fraction: float = 1 / 3
    detector_data: str = "subsample"  # or "full"


@dataclass
class ArchConfig:
    arch_id: str = "resnet18"
    width: float = 1.0


@dataclass
class TrainSection:
    """TrainConfig minus the seed, which comes from the experiment's seed block."""
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 20
    early_stopping_patience: Optional[int] = None
    lr_schedule_on_eval_loss: bool = False

    def to_train_config(self, seed, loss="cross_entropy"):
        return TrainConfig(loss=loss, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=self.epochs, early_stopping_patience=self.early_stopping_patience,
                           lr_schedule_on_eval_loss=self.lr_schedule_on_eval_loss, seed=seed)


@dataclass
class TriggerConfig:
    type: str = "adversarial"
    n: int = 100
    epsilon: float = 8 / 255
    foreign_dataset: str = "cifar100"
    threshold: float = 0.9
    # owner's clean model used to craft adversarial triggers
    owner_arch: ArchConfig = field(default_factory=ArchConfig)
    owner_train: TrainSection = field(default_factory=TrainSection)


@dataclass
class MarkingConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainSection = field(default_factory=lambda: TrainSection(epochs=30))
    trigger_repeat: int = 1


@dataclass
class AdvWrapperConfig:
    detector_arch: ArchConfig = field(default_factory=ArchConfig)
    detector_train: TrainSection = field(default_factory=TrainSection)
    surrogate_arch: ArchConfig = field(default_factory=ArchConfig)
    surrogate_train: TrainSection = field(default_factory=TrainSection)
    purifier_width: float = 1.0
    purifier_train: TrainSection = field(default_factory=TrainSection)
    epsilon: float = 8 / 255
    holdout_fraction: float = 0.2


@dataclass
class OODWrapperConfig:
    detector_arch: ArchConfig = field(default_factory=lambda: ArchConfig("mobilenet_v2"))
    detector_train: TrainSection = field(default_factory=lambda: TrainSection(learning_rate=0.01))
    pool_sources: list = field(default_factory=lambda: ["cifar100", "svhn", "cinic10_noncifar"])
    mode: str = "diluted"
    excluded_ids: list = field(default_factory=lambda: ["cifar100"])
    balance: float = 1.0
    pool_limit_per_source: Optional[int] = None
    holdout_fraction: float = 0.2


@dataclass
class RLWrapperConfig:
    extractor_width: float = 1.0
    extractor_train: TrainSection = field(
        default_factory=lambda: TrainSection(learning_rate=0.01, batch_size=64, epochs=50))
    partial_epochs: int = 15
    train_dataset: str = "cifar10"  # or "cinic10"
    pca_variance: Optional[float] = None
    classifier: str = "svm"  # or "kmeans"
    c_grid: list = field(default_factory=lambda: [1.0, 10.0])
    policy: str = "substitute"
    svm_max_examples: Optional[int] = None
    # also report CV for each PCA fraction and the K-Means/Hungarian baseline
    feature_study: bool = False
    study_fractions: list = field(default_factory=lambda: [0.95, 0.90, 0.85])


@dataclass
class WrapperConfig:
    kind: str = "adversarial"  # adversarial | ood | random_label | none
    adversarial: AdvWrapperConfig = field(default_factory=AdvWrapperConfig)
    ood: OODWrapperConfig = field(default_factory=OODWrapperConfig)
    random_label: RLWrapperConfig = field(default_factory=RLWrapperConfig)


@dataclass
class Seeds:
    data: int = 0
    model: int = 0
    trigger: int = 0
    denial: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    marking: MarkingConfig = field(default_factory=MarkingConfig)
    wrapper: WrapperConfig = field(default_factory=WrapperConfig)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs"

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical(self, exclude=("output_dir",)):
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        cfg = from_dict(cls, d)
        validate(cfg)
        return cfg


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check_type(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key_path=path)
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key_path=path)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key_path=path)
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key_path=path)
        return value
    if tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key_path=path)
        return list(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", key_path=path)
        return dict(value)
    return value


def from_dict(cls, d, path=""):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping, got {d!r}", key_path=path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            raise ConfigError("unknown key", key_path=f"{path}.{key}" if path else key)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _check_type(d[f.name], hints[f.name], sub)
    return cls(**kwargs)


def _choice(value, options, path):
    if value not in options:
        raise ConfigError(f"must be one of {list(options)}, got {value!r}", key_path=path)


def validate(cfg):
    from ..data import DATASET_IDS
    from ..models import ARCH_IDS

    _choice(cfg.task.dataset, DATASET_IDS, "task.dataset")
    _choice(cfg.data.detector_data, ("subsample", "full"), "data.detector_data")
    if not 0 < cfg.data.adversary_fraction <= 1:
        raise ConfigError("must lie in (0, 1]", key_path="data.adversary_fraction")
    _choice(cfg.trigger.type, ("adversarial", "ood", "random_label"), "trigger.type")
    _choice(cfg.trigger.foreign_dataset, DATASET_IDS, "trigger.foreign_dataset")
    if cfg.trigger.n < 1:
        raise ConfigError("must be >= 1", key_path="trigger.n")
    if not 0 < cfg.trigger.threshold <= 1:
        raise ConfigError("must lie in (0, 1]", key_path="trigger.threshold")
    if cfg.trigger.epsilon < 0:
        raise ConfigError("must be >= 0", key_path="trigger.epsilon")
    _choice(cfg.wrapper.kind, ("adversarial", "ood", "random_label", "none"), "wrapper.kind")
    _choice(cfg.wrapper.ood.mode, ("diluted", "excluded"), "wrapper.ood.mode")
    for s in cfg.wrapper.ood.pool_sources:
        _choice(s, DATASET_IDS + ("cinic10_noncifar",), "wrapper.ood.pool_sources")
    _choice(cfg.wrapper.random_label.classifier, ("svm", "kmeans"), "wrapper.random_label.classifier")
    _choice(cfg.wrapper.random_label.train_dataset, ("cifar10", "cinic10"), "wrapper.random_label.train_dataset")
    _choice(cfg.wrapper.random_label.policy, ("substitute", "arbitrate"), "wrapper.random_label.policy")
    for path, arch in [("trigger.owner_arch", cfg.trigger.owner_arch), ("marking.arch", cfg.marking.arch),
                       ("wrapper.adversarial.detector_arch", cfg.wrapper.adversarial.detector_arch),
                       ("wrapper.adversarial.surrogate_arch", cfg.wrapper.adversarial.surrogate_arch),
                       ("wrapper.ood.detector_arch", cfg.wrapper.ood.detector_arch)]:
        _choice(arch.arch_id, ARCH_IDS, f"{path}.arch_id")
        if arch.width <= 0:
            raise ConfigError("must be > 0", key_path=f"{path}.width")
    for path, section in _train_sections(cfg):
        try:
            section.to_train_config(0)
        except (ConfigError, ValueError) as e:
            raise ConfigError(str(e), key_path=path) from None
    return cfg


def _train_sections(cfg):
    return [
        ("trigger.owner_train", cfg.trigger.owner_train),
        ("marking.train", cfg.marking.train),
        ("wrapper.adversarial.detector_train", cfg.wrapper.adversarial.detector_train),
        ("wrapper.adversarial.surrogate_train", cfg.wrapper.adversarial.surrogate_train),
        ("wrapper.adversarial.purifier_train", cfg.wrapper.adversarial.purifier_train),
        ("wrapper.ood.detector_train", cfg.wrapper.ood.detector_train),
        ("wrapper.random_label.extractor_train", cfg.wrapper.random_label.extractor_train),
    ]


def apply_overrides(d, overrides):
    """Apply ``dotted.key=value`` strings to a config mapping; values parse as YAML scalars.

    Only keys that exist in the schema may be set.
    """
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", key_path=item)
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.split(".")
        cls, node = ExperimentConfig, d
        for i, part in enumerate(parts):
            hints = typing.get_type_hints(cls) if cls is not None else {}
            if cls is not None and part not in hints:
                raise ConfigError("unknown key", key_path=".".join(parts[:i + 1]))
            if i == len(parts) - 1:
                node[part] = value
            else:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError("cannot descend into a non-mapping", key_path=".".join(parts[:i + 1]))
                nxt = hints.get(part)
                cls = nxt if dataclasses.is_dataclass(nxt) else None
                if cls is None and nxt is not dict:
                    raise ConfigError("cannot descend into a scalar", key_path=".".join(parts[:i + 1]))
    return d


def load_config(path, overrides=()):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError("config file not found", key_path=str(path)) from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}", key_path=str(path)) from None
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))


def dump_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
