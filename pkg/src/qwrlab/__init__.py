"""Q-value weighted regression (QWR) and advantage weighted regression (AWR) in numpy."""

from .awr import AWRTrainer
from .config import PRESETS, TrainerConfig, preset
from .envs import BitFlipEnv, PointEnv, make_env
from .estimators import AWR, QWR
from .exceptions import ConfigError, TrainingDivergenceError
from .experiment import ExperimentSpec, run_experiment, summarize
from .qwr import QWRTrainer
from .theory import verify_theorems
from .training import train

__version__ = "0.1.0"

__all__ = [
    "AWR",
    "AWRTrainer",
    "BitFlipEnv",
    "ConfigError",
    "ExperimentSpec",
    "PRESETS",
    "PointEnv",
    "QWR",
    "QWRTrainer",
    "TrainerConfig",
    "TrainingDivergenceError",
    "make_env",
    "preset",
    "run_experiment",
    "summarize",
    "train",
    "verify_theorems",
]
