"""Declarative experiment runner for the desk-scale studies."""
from .config import KINDS, list_experiments, load_config, parse_config_text, validate
from .experiments import TASKS, make_mixing
from .runner import ExperimentFailed, aggregate, resolve_threads, run_experiment

__all__ = [
    "KINDS",
    "TASKS",
    "ExperimentFailed",
    "aggregate",
    "list_experiments",
    "load_config",
    "make_mixing",
    "parse_config_text",
    "resolve_threads",
    "run_experiment",
    "validate",
]
