__version__ = "0.1.0"

from .config import RunConfig, load_config, write_default_config
from .environments import load_fixture, make_env
from .errors import ConfigError, DpoError, NonFiniteError, UndefinedBaselineError, UnsupportedCapabilityError
from .trainer import Trainer, diagnose, evaluate, train
from .verify import run_suite

__all__ = [
    "RunConfig",
    "load_config",
    "write_default_config",
    "make_env",
    "load_fixture",
    "Trainer",
    "train",
    "evaluate",
    "diagnose",
    "run_suite",
    "DpoError",
    "ConfigError",
    "NonFiniteError",
    "UndefinedBaselineError",
    "UnsupportedCapabilityError",
]
