"""Latent policy steering laboratory: one-step generative policies steered by critics."""
from .config import ExperimentConfig, build_config
from .estimator import LatentPolicySteering
from .experiments import run_diagnostics, run_eval, run_gen_data, run_sweep, run_train, summarize

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "LatentPolicySteering", "build_config", "run_diagnostics", "run_eval",
    "run_gen_data", "run_sweep", "run_train", "summarize",
]
