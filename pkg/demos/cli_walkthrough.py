"""Drive the command-line tool stage by stage, as a shell session would.

Equivalent shell:
    triggerguard data    --config exp.yaml
    triggerguard trigger --config exp.yaml
    ...
    triggerguard report  --config exp.yaml --format table_text --format csv
"""

import json
import tempfile
from pathlib import Path

import yaml

from triggerguard.cli import main
from triggerguard.synthetic import write_fake_datasets

work = Path(tempfile.mkdtemp(prefix="cli-demo-"))
root = write_fake_datasets(work / "data", n_train=300, n_test=120, n_foreign=150)
tiny = {"arch_id": "vgg11", "width": 0.125}
cfg = {
    "name": "cli-demo",
    "task": {"data_root": str(root), "train_limit": 300, "test_limit": 80},
    "trigger": {"type": "random_label", "n": 12},
    "marking": {"arch": tiny, "train": {"epochs": 6, "batch_size": 32}, "trigger_repeat": 2},
    "wrapper": {"kind": "random_label",
                "random_label": {"extractor_width": 0.125, "partial_epochs": 10,
                                 "extractor_train": {"epochs": 16, "batch_size": 32}}},
    "output_dir": str(work / "runs"),
}
path = work / "exp.yaml"
path.write_text(yaml.safe_dump(cfg))

print("marking before the trigger exists ->", main(["mark", "--config", str(path)]), "(missing upstream)")
print("a typo in an override            ->", main(["data", "--config", str(path), "trigger.nn=5"]), "(schema)")

for cmd in ("data", "trigger", "mark", "defend", "eval"):
    print(f"$ triggerguard {cmd}")
    assert main([cmd, "--config", str(path)]) == 0
main(["report", "--config", str(path), "--format", "table_text", "--format", "csv"])
print((work / "runs" / "reports" / "table.txt").read_text())

print("provenance:")
for line in (work / "runs" / "provenance.jsonl").read_text().splitlines():
    rec = json.loads(line)
    print(f"  {rec['subcommand']:8s} {rec['status']:17s} {rec['config_hash'][:12]}")
