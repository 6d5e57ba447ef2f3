"""CLI, configuration, file formats, context selection and evaluation suites."""

from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .evaluate import MetricsRow, evaluate_suite, paired_bootstrap_ci, run_ablation
from .pgm import PgmError, read_pgm, write_pgm
from .selection import select_context_knn, select_context_random

__all__ = [
    "ConfigError", "ExperimentConfig", "parse_config", "serialize_config",
    "MetricsRow", "evaluate_suite", "paired_bootstrap_ci", "run_ablation",
    "PgmError", "read_pgm", "write_pgm",
    "select_context_knn", "select_context_random",
]
