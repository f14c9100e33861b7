import json

import pytest
import yaml

from triggerguard.cli import main
from triggerguard.harness import EvalReport, ExperimentConfig, Pipeline

from .conftest import tiny_config


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _provenance(out):
    return [json.loads(line) for line in (out / "provenance.jsonl").read_text().splitlines()]


@pytest.fixture
def cfg_file(fake_root, tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(tiny_config(fake_root, tmp_path / "out", "ood", "ood")))
    return path


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_schema_violation_exit_2(cfg_file, capsys):
    assert main(["data", "--config", str(cfg_file), "trigger.nn=3"]) == 2
    err = _err(capsys)
    assert err["key_path"] == "trigger.nn" and err["stage"] == "data"
    assert main(["data", "--config", str(cfg_file), "wrapper.kind=magic"]) == 2
    assert _err(capsys)["key_path"] == "wrapper.kind"


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["data", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_missing_upstream_exit_3(cfg_file, tmp_path, capsys):
    assert main(["mark", "--config", str(cfg_file)]) == 3
    err = _err(capsys)
    assert "triggerguard trigger" in err["message"] and err["stage"] == "mark"
    rec = _provenance(tmp_path / "out")[-1]
    assert rec["status"] == "missing-artifact" and rec["subcommand"] == "mark"


def test_full_sequence_and_replay(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    for cmd in ("data", "trigger", "mark", "defend", "eval"):
        assert main([cmd, "--config", str(cfg_file)]) == 0, capsys.readouterr().err
    printed = capsys.readouterr().out
    assert "watermark_accuracy" in printed
    cfg = ExperimentConfig.from_dict(yaml.safe_load(cfg_file.read_text()))
    report_path = Pipeline(cfg, out).stage_dir("eval") / "report.json"
    report = EvalReport.load(report_path)
    assert report.config_hash == cfg.config_hash()

    assert main(["report", "--config", str(cfg_file), "--format", "table_text", "--format", "csv"]) == 0
    assert (out / "reports" / "table.txt").exists() and (out / "reports" / "table.csv").exists()

    records = _provenance(out)
    assert [r["subcommand"] for r in records] == ["data", "trigger", "mark", "defend", "eval", "report"]
    assert all(r["status"] == "ok" and r["config_hash"] == cfg.config_hash() for r in records)
    assert all(r["tool_version"] and r["seeds"] == {"data": 0, "model": 0, "trigger": 0, "denial": 0}
               for r in records)

    # replay from the provenance records alone into a fresh directory
    replay = tmp_path / "replay"
    for i, r in enumerate(records[:-1]):
        cpath = tmp_path / f"replay-{i}.json"
        cpath.write_text(json.dumps(r["config"]))
        assert main([r["subcommand"], "--config", str(cpath), "--out", str(replay)]) == 0
    again = EvalReport.load(Pipeline(cfg, replay).stage_dir("eval") / "report.json")
    assert again.values() == report.values()


def test_seed_flag_targets_one_seed(cfg_file, tmp_path):
    out = tmp_path / "out"
    assert main(["data", "--config", str(cfg_file)]) == 0
    assert main(["trigger", "--config", str(cfg_file), "--seed", "5"]) == 0
    recs = _provenance(out)
    assert recs[1]["seeds"] == {"data": 0, "model": 0, "trigger": 5, "denial": 0}
    assert recs[1]["config_hash"] != recs[0]["config_hash"]
    assert main(["trigger", "--config", str(cfg_file), "--seed", "model=3"]) == 0
    assert _provenance(out)[-1]["seeds"]["model"] == 3
    assert main(["trigger", "--config", str(cfg_file), "--seed", "x"]) == 2


def test_force_recomputes(cfg_file, tmp_path):
    for cmd in ("data", "trigger", "mark", "defend"):
        assert main([cmd, "--config", str(cfg_file)]) == 0
    cfg = ExperimentConfig.from_dict(yaml.safe_load(cfg_file.read_text()))
    d = Pipeline(cfg, tmp_path / "out").stage_dir("defend")
    t0 = d.stat().st_mtime_ns
    assert main(["defend", "--config", str(cfg_file)]) == 0
    assert d.stat().st_mtime_ns == t0
    assert main(["defend", "--config", str(cfg_file), "--force"]) == 0
    assert d.stat().st_mtime_ns != t0


def test_report_needs_eval(cfg_file, capsys):
    assert main(["report", "--config", str(cfg_file)]) == 3
    assert _err(capsys)["stage"] == "report"


def test_several_configs_only_for_report(cfg_file, capsys):
    assert main(["data", "--config", str(cfg_file), "--config", str(cfg_file)]) == 2
