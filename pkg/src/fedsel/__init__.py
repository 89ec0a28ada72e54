"""Federated learning under two-stage client selection.

Synthetic populations, enrollment and participation simulation, propensity
estimation, calibration weighting, FedIPW and baseline aggregation, and
exact checks of the bias-floor behaviour.
"""

from .config import ExperimentConfig, dump_config, load_config
from .experiments import run_panel, run_sweep
from .verification import run_verification_suite

__all__ = ["ExperimentConfig", "dump_config", "load_config", "run_panel", "run_sweep", "run_verification_suite"]
__version__ = "0.1.0"
