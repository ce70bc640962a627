"""Experiment orchestration: configs, sweeps, analysis and output emission."""
from .config import ExperimentConfig, SweepAxes, AttackSettings, load_config, parse_config
from .svg import emit_outputs
from .sweep import (SweepRow, SweepTable, incremental_task_sweep, run_experiment,
                    surrogate_correlation, train_models)

__all__ = ["ExperimentConfig", "SweepAxes", "AttackSettings", "load_config", "parse_config",
           "emit_outputs", "SweepRow", "SweepTable", "incremental_task_sweep",
           "run_experiment", "surrogate_correlation", "train_models"]
