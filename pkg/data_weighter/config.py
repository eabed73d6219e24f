"""
Configuration settings for data weighting experiments.

A config file is a flat key=value text file (comments with #), read with
python-dotenv. Values are layered: defaults, then the file, then CLI flags.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values

from .errors import ConfigurationError

LOGGER = logging.getLogger(__name__)

# Default paths
DEFAULT_DATA_DIR = "data"
DEFAULT_OUTPUT_DIR = "runs"
DATA_DIR_ENV = "DATA_WEIGHTER_DATA_DIR"
OUTPUT_DIR_ENV = "DATA_WEIGHTER_OUT"

# Mixed-domain experiment
DEFAULT_DOMAINS = ("mnist", "fashion_mnist", "kmnist")
DEFAULT_TARGET = "fashion_mnist"
DEFAULT_SOURCE_CAP = 6000
DEFAULT_TARGET_TRAIN = 2000
DEFAULT_TARGET_TEST = 2000

# Training
DEFAULT_ALPHA = 1e-4
DEFAULT_ETA = 10.0
DEFAULT_BATCH_SIZE = 64
DEFAULT_EPOCHS = 100
DEFAULT_HIDDEN = 100
DEFAULT_LATENT = 1

# Pruning grid: lambda in {0.1, 0.25}, rho in {0.5, 0.9}
DEFAULT_LAMBDA = 0.25
DEFAULT_RHO = 0.5

# Meta-loss
DEFAULT_WAYS = 10
DEFAULT_SHOTS = 5
DEFAULT_META_BATCH_SIZE = 64

# NN weighter decay for pixels scaled to [0, 1]
DEFAULT_NN_BETA = 0.1

METHODS = ("bdw", "dw", "l2rw", "nn", "none", "oracle")
TASKS = ("vae", "rotation")
META_LOSSES = ("reconstruction", "ncc")
PRUNE_RULES = ("prose", "equation")
ACTIVATIONS = ("tanh", "relu", "sigmoid")

# Accepted spellings for a few keys
KEY_ALIASES = {
    "lambda": "lam",
    "k": "batch_size",
    "t": "epochs",
    "meta_batch": "meta_batch_size",
    "out": "out_dir",
    "output": "out_dir",
}

TRUE_STRINGS = ("true", "1", "t", "yes", "on")
FALSE_STRINGS = ("false", "0", "f", "no", "off")


@dataclass(frozen=True)
class ExperimentConfig:
    """All settings of one training run."""
    method: str = "bdw"
    task: str = "vae"
    alpha: float = DEFAULT_ALPHA
    eta: float = DEFAULT_ETA
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    lam: float = DEFAULT_LAMBDA
    rho: float = DEFAULT_RHO
    prune_enabled: bool = True
    prune_rule: str = "prose"
    meta_loss: Optional[str] = None
    meta_batch_size: int = DEFAULT_META_BATCH_SIZE
    ways: int = DEFAULT_WAYS
    shots: int = DEFAULT_SHOTS
    queries: Optional[int] = None
    reuse_support: bool = False
    hidden: int = DEFAULT_HIDDEN
    latent: int = DEFAULT_LATENT
    activation: str = "tanh"
    nn_beta: float = DEFAULT_NN_BETA
    l2rw_lookahead: bool = False
    seed: int = 0
    data_dir: str = DEFAULT_DATA_DIR
    out_dir: Optional[str] = DEFAULT_OUTPUT_DIR
    domains: Tuple[str, ...] = DEFAULT_DOMAINS
    target: str = DEFAULT_TARGET
    source_cap: Optional[int] = DEFAULT_SOURCE_CAP
    target_train: int = DEFAULT_TARGET_TRAIN
    target_test: int = DEFAULT_TARGET_TEST
    target_val: int = 0
    synthetic: bool = False
    synth_per_domain: int = 300
    synth_size: int = 28
    lr_milestones: Tuple[int, ...] = field(default_factory=tuple)
    lr_decay: float = 0.1
    all_rotations: bool = True
    probe_every: int = 0
    eval_samples: int = 1

    @property
    def objective(self) -> str:
        """Meta-loss in use: explicit setting, else reconstruction for VAE and NCC for rotation."""
        if self.meta_loss:
            return self.meta_loss
        return "reconstruction" if self.task == "vae" else "ncc"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "ExperimentConfig":
        """Raise ConfigurationError on the first invalid setting."""
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method '{self.method}', expected one of {METHODS}")
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.objective not in META_LOSSES:
            raise ConfigurationError(f"unknown meta_loss '{self.meta_loss}', expected one of {META_LOSSES}")
        if self.objective == "reconstruction" and self.task != "vae":
            raise ConfigurationError("the reconstruction meta-loss needs task=vae")
        if self.prune_rule not in PRUNE_RULES:
            raise ConfigurationError(f"unknown prune_rule '{self.prune_rule}', expected one of {PRUNE_RULES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{self.activation}', expected one of {ACTIVATIONS}")
        for name in ("alpha", "eta", "nn_beta", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("batch_size", "epochs", "meta_batch_size", "hidden", "latent",
                     "synth_per_domain", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("lam", "rho"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.ways < 2:
            raise ConfigurationError(f"ways must be at least 2, got {self.ways}")
        if self.shots < 1:
            raise ConfigurationError(f"shots must be at least 1, got {self.shots}")
        if self.queries is not None and self.queries < 1:
            raise ConfigurationError(f"queries must be at least 1, got {self.queries}")
        if self.synth_size < 6:
            raise ConfigurationError(f"synth_size must be at least 6, got {self.synth_size}")
        if self.target_train < 1 or self.target_test < 1:
            raise ConfigurationError("target_train and target_test must be at least 1")
        if self.target_val < 0:
            raise ConfigurationError(f"target_val must be non-negative, got {self.target_val}")
        if self.target_val and self.task != "rotation":
            raise ConfigurationError("a validation split is only used by task=rotation")
        if self.source_cap is not None and self.source_cap < 0:
            raise ConfigurationError(f"source_cap must be non-negative, got {self.source_cap}")
        if self.probe_every < 0:
            raise ConfigurationError(f"probe_every must be non-negative, got {self.probe_every}")
        if any(m < 1 for m in self.lr_milestones):
            raise ConfigurationError(f"lr_milestones must be positive epochs, got {self.lr_milestones}")
        if self.target not in self.domain_names:
            raise ConfigurationError(f"target '{self.target}' is not among the domains {self.domain_names}")
        return self

    @property
    def domain_names(self) -> Tuple[str, ...]:
        if self.synthetic:
            from .data import SYNTHETIC_DOMAINS
            return SYNTHETIC_DOMAINS
        return tuple(self.domains)

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["domains"] = list(self.domains)
        out["lr_milestones"] = list(self.lr_milestones)
        out["meta_loss"] = self.objective
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_bool(name: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in TRUE_STRINGS:
        return True
    if low in FALSE_STRINGS:
        return False
    raise ConfigurationError(f"{name}: expected a boolean, got '{raw}'")


def _parse_optional_int(name: str, raw: str) -> Optional[int]:
    if raw.strip().lower() in ("", "none", "null"):
        return None
    return _parse_number(name, raw, int)


def _parse_number(name: str, raw: str, kind):
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigurationError(f"{name}: expected {kind.__name__}, got '{raw}'") from None


def _parse_list(raw: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in raw.replace(";", ",").split(",") if part.strip())


def _coerce(name: str, raw: Any) -> Any:
    """Convert a raw value to the type of the named field."""
    if not isinstance(raw, str):
        if name in ("domains", "lr_milestones") and raw is not None:
            raw = tuple(raw)
            return tuple(int(m) for m in raw) if name == "lr_milestones" else tuple(str(d) for d in raw)
        return raw
    default = _FIELDS[name].default
    if name == "domains":
        return _parse_list(raw)
    if name == "lr_milestones":
        return tuple(_parse_number(name, part, int) for part in _parse_list(raw))
    if name in ("queries", "source_cap"):
        return _parse_optional_int(name, raw)
    if name in ("meta_loss", "out_dir"):
        return raw.strip() or None
    if isinstance(default, bool):
        return _parse_bool(name, raw)
    if isinstance(default, int):
        return _parse_number(name, raw, int)
    if isinstance(default, float):
        return _parse_number(name, raw, float)
    return raw.strip()


def canonical_key(key: str) -> str:
    """Map a user-facing key onto an ExperimentConfig field name."""
    name = key.strip().lower().replace("-", "_")
    name = KEY_ALIASES.get(name, name)
    if name not in _FIELDS:
        raise ConfigurationError(f"unknown config key '{key}'")
    return name


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a key=value file into typed field values."""
    path = Path(path).expanduser()
    if not path.is_file():
        raise ConfigurationError(f"config file '{path}' does not exist")
    values = {}
    for key, raw in dotenv_values(path).items():
        if raw is None:
            raise ConfigurationError(f"config key '{key}' in '{path}' has no value")
        name = canonical_key(key)
        values[name] = _coerce(name, raw)
    LOGGER.debug("Read %d settings from %s", len(values), path)
    return values


def environment_defaults() -> Dict[str, Any]:
    """Path defaults taken from the environment."""
    values = {}
    data_dir = os.getenv(DATA_DIR_ENV)
    if data_dir:
        values["data_dir"] = data_dir
    out_dir = os.getenv(OUTPUT_DIR_ENV)
    if out_dir:
        values["out_dir"] = out_dir
    return values


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Build a validated config from defaults, environment, file and overrides.

    Args:
        path: Optional key=value file; keys may use aliases such as lambda or K.
        overrides: Field values that win over the file. Entries whose value is
            None are ignored, so unset CLI flags fall through.

    Returns:
        The validated ExperimentConfig.

    Raises:
        ConfigurationError: If the file is missing, a key is unknown, a value
            does not parse, or the combined settings are invalid.
    """
    values = environment_defaults()
    if path is not None:
        values.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        name = canonical_key(key)
        values[name] = _coerce(name, value)
    return ExperimentConfig(**values).validate()
