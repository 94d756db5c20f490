"""Federated learning with personalised subnets sampled from a shared supernet."""

from .config import ExperimentConfig, load_config, parse_config, serialize
from .errors import ClientDivergedError, ConfigError, InvalidInputError, NumericError
from .server import Experiment, RoundReport, run_experiment

__all__ = [
    "ClientDivergedError",
    "ConfigError",
    "Experiment",
    "ExperimentConfig",
    "InvalidInputError",
    "NumericError",
    "RoundReport",
    "load_config",
    "parse_config",
    "run_experiment",
    "serialize",
]
__version__ = "0.1.0"
