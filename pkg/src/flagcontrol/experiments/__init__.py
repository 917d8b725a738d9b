"""Reproduction harness: configuration, ensemble runs, sweeps and statistics."""
from .analysis import (
    FitResult,
    FrontierResult,
    NoiseSweepResult,
    duration_sweep,
    fit_linear,
    frontier_scan,
    minimum_time_scan,
    noise_sweep,
    summarize,
)
from .config import ExperimentConfig, config_from_dict, dump_config, load_config
from .runner import CSV_COLUMNS, RunRecord, member_seed, read_records, run_ensemble, write_records
from .tasks import Task, build_task, fock_target
