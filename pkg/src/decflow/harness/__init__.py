"""Experiment configuration, orchestration and the command-line interface."""

from .config import ExperimentConfig, config_from_dict, load_config
from .experiment import run_experiment, run_trial, summarize, trial_rng

__all__ = ["ExperimentConfig", "config_from_dict", "load_config", "run_experiment", "run_trial",
           "summarize", "trial_rng"]
