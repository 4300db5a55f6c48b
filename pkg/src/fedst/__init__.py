"""Federated spatial-temporal traffic prediction lab with a dual-branch
disentangled client model, pattern-bank sharing and prototype-guided fusion."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config_file  # noqa: F401
from .harness import run_ablation, run_federated_experiment, run_sweep  # noqa: F401
