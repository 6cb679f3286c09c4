"""
Configuration management for dpo-lab
"""
import dataclasses
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .environments import ENVIRONMENTS
from .errors import ConfigError
from .policy import LEARNERS, PolicyConfig

CONFIG_ENV_VAR = "DPO_LAB_CONFIG"
LOCAL_CONFIG_NAME = "dpo.cfg"
ESTIMATORS = ("uae", "mc")

# batch_size, epochs, baseline_updates, critic_updates per learner
LEARNER_DEFAULTS: Dict[str, Tuple[int, int, int, int]] = {
    "ppo": (2048, 10, 12, 1),
    "a2c": (256, 1, 4, 1),
    "trpo": (4096, 1, 12, 10),
}
LEARNER_FIELDS = ("batch_size", "epochs", "baseline_updates", "critic_updates")


@dataclass
class RunConfig:
    """Every hyperparameter of a training run; learner-dependent fields resolve from ``LEARNER_DEFAULTS``"""

    env: str = "pointmass"
    learner: str = "ppo"
    total_steps: int = 100_000
    seed: int = 0
    out_dir: str = "runs/dpo"

    gamma: float = 0.99
    lam: float = 0.95
    tau: float = 5e-3
    omega: float = 0.7
    nu: float = 0.3
    alpha: float = 0.03
    learning_rate: float = 3e-4
    minibatch_size: int = 256
    m_actions: int = 30
    critic_samples: int = 25
    replay_capacity: int = 1_000_000
    hidden_sizes: Tuple[int, ...] = (256, 256)
    sigma_floor: float = 1e-3

    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    baseline_updates: Optional[int] = None
    critic_updates: Optional[int] = None

    ppo_clip: float = 0.2
    max_kl: float = 0.1
    damping: float = 0.1
    grad_clip: float = 100.0

    eval_interval: int = 4096
    eval_episodes: int = 10
    warmup: int = 2500
    horizon: Optional[int] = None

    estimator: str = "uae"
    residual_baseline: bool = True
    interaction_critic: bool = True
    batch_critic: bool = True

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"Unknown learner '{self.learner}'. Choose from: {', '.join(LEARNERS)}")
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"Unknown environment '{self.env}'. Choose from: {', '.join(sorted(ENVIRONMENTS))}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"Unknown estimator '{self.estimator}'. Choose from: {', '.join(ESTIMATORS)}")
        for name, value in zip(LEARNER_FIELDS, LEARNER_DEFAULTS[self.learner]):
            if getattr(self, name) is None:
                setattr(self, name, value)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self._validate()

    def _validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        for name in ("lam", "omega", "nu"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        positive = (
            "total_steps", "minibatch_size", "m_actions", "critic_samples", "replay_capacity",
            "batch_size", "epochs", "baseline_updates", "critic_updates", "eval_interval", "eval_episodes",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for advantage normalization")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be non-negative, got {self.warmup}")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"hidden_sizes must be positive widths, got {self.hidden_sizes}")
        if self.learning_rate <= 0.0 or self.sigma_floor <= 0.0 or self.grad_clip <= 0.0:
            raise ConfigError("learning_rate, sigma_floor and grad_clip must be positive")

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            learner=self.learner,
            omega=self.omega,
            alpha=self.alpha,
            ppo_clip=self.ppo_clip,
            max_kl=self.max_kl,
            damping=self.damping,
            grad_clip=self.grad_clip,
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_file(self, path: Union[str, Path]) -> Path:
        """Write every field as ``key = value``; ``from_file`` reads it back to an equal config"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# dpo-lab run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> "RunConfig":
        values = read_config_file(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(name: str, raw: str) -> Any:
    kind = FIELD_TYPES[name]
    if typing.get_origin(kind) is Union:
        if raw.lower() == "none":
            return None
        kind = next(arg for arg in typing.get_args(kind) if arg is not type(None))
    if kind is bool:
        lowered = raw.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected true or false, got '{raw}'")
        return lowered in ("true", "1", "yes")
    if kind is int:
        return int(float(raw)) if "e" in raw.lower() and float(raw).is_integer() else int(raw)
    if kind is float:
        return float(raw)
    if typing.get_origin(kind) is tuple:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    return raw


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Parse a flat ``key = value`` file

    Args:
        path: Config file location

    Returns:
        Dict: Parsed values for the keys present in the file

    Raises:
        ConfigError: If the file is missing, a key is unknown or a value does not parse
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    values: Dict[str, Any] = {}
    for number, raw_line in enumerate(path.read_text().splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got '{raw_line.strip()}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{path}:{number}: unknown key '{key}'")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"{path}:{number}: invalid value for '{key}': {e}")
    return values


def get_config_path() -> Path:
    """
    Get the path to the user configuration file

    Returns:
        Path: ~/.dpo-lab/config.cfg
    """
    return Path.home() / ".dpo-lab" / "config.cfg"


def has_config() -> bool:
    return get_config_path().exists()


def discover_config_path(explicit: Optional[Union[str, Path]] = None) -> Optional[Path]:
    """
    Find the config file in order of priority:
    1. The explicit ``--config`` path
    2. DPO_LAB_CONFIG environment variable
    3. ./dpo.cfg
    4. ~/.dpo-lab/config.cfg

    Returns:
        Path or None: The first file found, None to use the built-in defaults

    Raises:
        ConfigError: If an explicitly named file (argument or environment) does not exist
    """
    if explicit:
        path = Path(explicit)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        return path

    env_path = os.environ.get(CONFIG_ENV_VAR)
    if env_path:
        path = Path(env_path)
        if not path.exists():
            raise ConfigError(f"{CONFIG_ENV_VAR} points to a missing file: {path}")
        return path

    local_path = Path(LOCAL_CONFIG_NAME)
    if local_path.exists():
        return local_path

    home_path = get_config_path()
    if home_path.exists():
        return home_path

    return None


def load_config(explicit: Optional[Union[str, Path]] = None, **overrides) -> RunConfig:
    """Discovered file (if any) with command-line overrides on top; ``None`` overrides are ignored"""
    path = discover_config_path(explicit)
    if path is None:
        return RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_file(path, **overrides)


def write_default_config(path: Optional[Union[str, Path]] = None) -> Path:
    """
    Create the configuration file with every default value

    Args:
        path: Target file, ~/.dpo-lab/config.cfg when omitted

    Raises:
        ConfigError: If the directory or file cannot be created
    """
    target = Path(path) if path else get_config_path()
    try:
        return RunConfig().to_file(target)
    except PermissionError as e:
        raise ConfigError(f"Permission denied while creating config: {e}")
    except OSError as e:
        raise ConfigError(f"Failed to write config: {e}")
