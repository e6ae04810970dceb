"""Orchestration: configs, evaluation, experiments and the run-directory layout."""
from .config import ExperimentConfig, load_config, parse_config
from .evaluate import EvalReport, evaluate_perplexity, read_report, write_report
from .experiments import (PipelineRun, SwapResult, emit_trace, run_catalogue_fraction_study, run_pipeline,
                          run_swap_experiment, swap_entity_model)
from .workspace import Workspace

__all__ = [
    "EvalReport", "ExperimentConfig", "PipelineRun", "SwapResult", "Workspace", "emit_trace",
    "evaluate_perplexity", "load_config", "parse_config", "read_report", "run_catalogue_fraction_study",
    "run_pipeline", "run_swap_experiment", "swap_entity_model", "write_report",
]
