"""Evaluation records and their table / CSV / plot renderings."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ValidationError

TABLE_FORMATS = ("table_text", "csv", "plot_bundle")
CSV_FIELDS = ("label", "task", "trigger_type", "wrapper_kind", "test_accuracy", "watermark_accuracy",
              "verification_bit", "threshold", "precision", "recall", "f1", "cv_accuracy", "cv_std",
              "config_hash", "model_hash")


@dataclass
class EvalReport:
    label: str
    task: str
    trigger_type: str
    wrapper_kind: str
    test_accuracy: float
    watermark_accuracy: float
    verification_bit: int
    threshold: float
    n_test: int = 0
    n_triggers: int = 0
    detector: dict = None
    cv: dict = None
    config_hash: str = ""
    checkpoints: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    baseline: "EvalReport" = None
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("test_accuracy", "watermark_accuracy"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if isinstance(self.baseline, dict):
            self.baseline = EvalReport.from_dict(self.baseline)

    def to_dict(self):
        d = asdict(self)
        d["baseline"] = self.baseline.to_dict() if self.baseline else None
        return d

    def values(self):
        """Everything except wall-clock timings: the part a rerun must reproduce exactly."""
        d = self.to_dict()
        d.pop("timing")
        if d["baseline"]:
            d["baseline"].pop("timing")
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def rows(self):
        return ([self.baseline] if self.baseline else []) + [self]

    def csv_row(self):
        det = self.detector or {}
        cv = self.cv or {}
        return {
            "label": self.label, "task": self.task, "trigger_type": self.trigger_type,
            "wrapper_kind": self.wrapper_kind, "test_accuracy": self.test_accuracy,
            "watermark_accuracy": self.watermark_accuracy, "verification_bit": self.verification_bit,
            "threshold": self.threshold, "precision": det.get("precision"), "recall": det.get("recall"),
            "f1": det.get("f1"), "cv_accuracy": cv.get("accuracy"), "cv_std": cv.get("std"),
            "config_hash": self.config_hash, "model_hash": self.checkpoints.get("evaluated", ""),
        }


def _table_rows(reports):
    if not reports:
        raise ValidationError("emit_report needs at least one report")
    tasks = {r.task for r in reports}
    if len(tasks) > 1:
        raise ValidationError(f"reports mix task datasets {sorted(tasks)} in one table")
    rows, seen = [], set()
    for r in reports:
        for row in r.rows():
            key = (row.label, row.checkpoints.get("evaluated"), row.config_hash if row is r else "")
            if key in seen:
                continue
            seen.add(key)
            rows.append(row)
    return rows


def format_table(reports, title=None):
    rows = _table_rows(reports)
    width = max(len("Model"), *(len(r.label) for r in rows))
    lines = []
    if title:
        lines.append(title)
    header = f"{'Model':<{width}} | Test Accuracy (%) | Watermark Accuracy (%)"
    lines += [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.label:<{width}} | {100 * r.test_accuracy:17.2f} | {100 * r.watermark_accuracy:22.2f}")
    return "\n".join(lines) + "\n"


def write_csv(reports, path):
    rows = _table_rows(reports)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.csv_row().items()})
    return path


def read_csv(path):
    """Parse a CSV written by ``write_csv`` back into row dicts with typed values."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                elif k in ("verification_bit",):
                    parsed[k] = int(v)
                elif k in ("test_accuracy", "watermark_accuracy", "threshold", "precision", "recall", "f1",
                           "cv_accuracy", "cv_std"):
                    parsed[k] = float(v)
                else:
                    parsed[k] = v
            out.append(parsed)
    return out


def plot_histories(reports, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for row in _table_rows(reports):
        for name, hist in (row.histories or {}).items():
            if not hist:
                continue
            epochs = [h["epoch"] for h in hist]
            fig, ax = plt.subplots(figsize=(6, 4))
            for key in ("train_acc", "eval_acc", "f1"):
                ys = [math.nan if h.get(key) is None else h[key] for h in hist]
                if not all(math.isnan(y) for y in ys):
                    ax.plot(epochs, ys, marker="o", label=key)
            if not ax.lines:
                for key in ("train_loss", "eval_loss"):
                    ax.plot(epochs, [math.nan if h.get(key) is None else h[key] for h in hist], marker="o",
                            label=key)
            ax.set_xlabel("epoch")
            ax.set_title(f"{row.label}: {name}")
            ax.legend()
            fname = out_dir / f"{_slug(row.label)}__{_slug(name)}.png"
            fig.tight_layout()
            fig.savefig(fname, dpi=100)
            plt.close(fig)
            written.append(fname)
    return written


def _slug(s):
    return "".join(c if c.isalnum() else "_" for c in s).strip("_").lower()


def emit_report(reports, fmt, out_dir, title=None):
    """Write reports as ``table_text``, ``csv`` or ``plot_bundle``; returns written paths."""
    if fmt not in TABLE_FORMATS:
        raise ValidationError(f"unknown report format {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "table_text":
        path = out_dir / "table.txt"
        path.write_text(format_table(reports, title))
        return [path]
    if fmt == "csv":
        return [write_csv(reports, out_dir / "table.csv")]
    return plot_histories(reports, out_dir / "plots")
