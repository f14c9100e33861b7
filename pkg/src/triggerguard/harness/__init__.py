from .config import ExperimentConfig, apply_overrides, load_config
from .evaluation import eval_accuracy, eval_binary_metrics
from .pipeline import STAGES, Pipeline, revalidate, run_experiment
from .report import EvalReport, emit_report, format_table, read_csv, write_csv

__all__ = [
    "ExperimentConfig", "apply_overrides", "load_config", "eval_accuracy", "eval_binary_metrics", "STAGES",
    "Pipeline", "revalidate", "run_experiment", "EvalReport", "emit_report", "format_table", "read_csv",
    "write_csv",
]
