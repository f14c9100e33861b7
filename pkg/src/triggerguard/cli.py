"""Command-line front end.

    triggerguard <data|trigger|mark|defend|eval> --config exp.yaml [key=value ...]
    triggerguard report --config exp.yaml [--config other.yaml ...] --format table_text

Each subcommand runs one stage of the experiment described by the config and
requires the earlier stages' artifacts to exist. Exit codes: 0 success,
2 invalid config or usage, 3 missing upstream artifact, 1 any other failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, MissingArtifactError
from .harness.config import load_config
from .harness.pipeline import Pipeline, provenance_record
from .harness.report import TABLE_FORMATS, EvalReport, emit_report

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

# the seed `--seed N` targets for each subcommand
SEED_FOR = {"data": "data", "trigger": "trigger", "mark": "model", "defend": "model", "eval": "denial"}


def build_parser():
    parser = argparse.ArgumentParser(prog="triggerguard", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("data", "trigger", "mark", "defend", "eval", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, action="append",
                       help="experiment config (JSON/YAML); `report` accepts several")
        p.add_argument("--force", action="store_true", help="recompute this stage even if cached")
        p.add_argument("--seed", action="append", default=[],
                       help=f"N sets the subcommand's seed ({', '.join(f'{k}->{v}' for k, v in SEED_FOR.items())}); "
                            "NAME=N sets seeds.NAME")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--format", choices=TABLE_FORMATS, action="append")
            p.add_argument("--title")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def _seed_overrides(command, seeds):
    out = []
    for s in seeds:
        if "=" in s:
            name, value = s.split("=", 1)
            out.append(f"seeds.{name}={value}")
        else:
            if command not in SEED_FOR:
                raise ConfigError(f"--seed N is ambiguous for `{command}`; use NAME=N", key_path="--seed")
            out.append(f"seeds.{SEED_FOR[command]}={s}")
    for o in out:
        try:
            int(o.split("=", 1)[1])
        except ValueError:
            raise ConfigError("seed values must be integers", key_path=o.split("=", 1)[0]) from None
    return out


def _load(path, overrides, out):
    if out:
        overrides = list(overrides) + [f"output_dir={json.dumps(out)}"]
    return load_config(path, overrides)


def _append_provenance(out_dir, record):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "provenance.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True, default=str) + "\n")


def _error(stage, exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "stage": stage, "exit_code": code}
    if getattr(exc, "key_path", None):
        payload["key_path"] = exc.key_path
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    command = args.command
    try:
        overrides = list(args.overrides) + _seed_overrides(command, args.seed)
        configs = [_load(p, overrides, args.out) for p in args.config]
    except ConfigError as e:
        return _error(command, e, EXIT_CONFIG)
    if command != "report" and len(configs) > 1:
        return _error(command, ConfigError("only `report` accepts several configs", key_path="--config"),
                      EXIT_CONFIG)

    cfg = configs[0]
    out_dir = Path(cfg.output_dir)
    try:
        if command == "report":
            reports = []
            for c in configs:
                p = Pipeline(c, auto=False, target=None)
                path = p.stage_dir("eval") / "report.json"
                if not path.exists():
                    raise MissingArtifactError("eval", path)
                reports.append(EvalReport.load(path))
            written = []
            for fmt in args.format or ["table_text"]:
                written += emit_report(reports, fmt, out_dir / "reports", args.title)
            for w in written:
                print(w)
            key = None
        else:
            pipeline = Pipeline(cfg, force={command} if args.force else (), auto=False, target=command)
            result = pipeline.run_stage(command)
            key = pipeline.stage_key(command)
            print(pipeline.stage_dir(command))
            if isinstance(result, EvalReport):
                print(json.dumps({"test_accuracy": result.test_accuracy,
                                  "watermark_accuracy": result.watermark_accuracy,
                                  "verification_bit": result.verification_bit,
                                  "baseline_watermark_accuracy": result.baseline.watermark_accuracy}))
    except MissingArtifactError as e:
        _append_provenance(out_dir, provenance_record(cfg, command, argv, "missing-artifact", error=str(e)))
        return _error(command, e, EXIT_MISSING)
    except ConfigError as e:
        _append_provenance(out_dir, provenance_record(cfg, command, argv, "config-error", error=str(e)))
        return _error(command, e, EXIT_CONFIG)
    except Exception as e:  # noqa: BLE001 - reported as a structured failure
        logging.getLogger(__name__).debug("stage failure", exc_info=True)
        _append_provenance(out_dir, provenance_record(cfg, command, argv, "failed", error=repr(e)))
        return _error(command, e, EXIT_FAIL)
    _append_provenance(out_dir, provenance_record(cfg, command, argv, "ok", stage_key=key))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
