"""
Module for run configuration: presets, config files, overrides and environment settings.
"""

import copy
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml
from dotenv import load_dotenv

from src.app.dataset import write_json
from src.app.dynamics import GRAVITY, Family
from src.app.errors import ConfigurationError
from src.app.fields import FieldConfig
from src.app.losses import LossWeights

logger = logging.getLogger(__name__)

CURRICULUM_UNITS = ("steps", "epochs")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule, batching and curriculum settings."""
    lr_mlp: float = 1e-3
    lr_physics: float = 5e-3
    decay_rate: float = 1.0
    decay_steps: float = 50.0
    decay_mlp: bool = True
    decay_physics: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 65536
    frames_start: int = 2
    frames_every: int = 30
    curriculum_unit: str = "steps"
    epochs: int = 1200
    substeps: int = 20

    def __post_init__(self) -> None:
        if not 0 < self.decay_rate <= 1:
            raise ConfigurationError("train.decay_rate must lie in (0, 1]",
                                     details=str(self.decay_rate))
        if self.decay_steps <= 0:
            raise ConfigurationError("train.decay_steps must be positive")
        if self.lr_mlp < 0 or self.lr_physics < 0:
            raise ConfigurationError("Learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be at least 1",
                                     details=str(self.batch_size))
        if self.frames_start < 1 or self.frames_every < 1:
            raise ConfigurationError("train.frames_start and train.frames_every must be at least 1")
        if self.curriculum_unit not in CURRICULUM_UNITS:
            raise ConfigurationError(f"train.curriculum_unit must be one of {CURRICULUM_UNITS}",
                                     details=self.curriculum_unit)
        if self.epochs < 0 or self.substeps < 1:
            raise ConfigurationError("train.epochs must be >= 0 and train.substeps >= 1")


@dataclass(frozen=True)
class InitConfig:
    """Starting values for parameters the mask initializer does not estimate."""
    l0: float = 1.0
    c0: float = 0.5
    k0: float = 1.5
    l_rest0: float = 0.25
    alpha0: float = 0.0
    mu0: float = 0.0
    scale0: float = 0.1
    from_masks: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration of one run."""
    family: str
    preset: str | None = None
    dataset: str | None = None
    seed: int = 0
    background: FieldConfig | None = field(default_factory=FieldConfig)
    object: FieldConfig = field(default_factory=FieldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    init: InitConfig = field(default_factory=InitConfig)
    gravity: float = GRAVITY
    use_homography: bool = True
    log_every: int = 50

    def __post_init__(self) -> None:
        Family.parse(self.family)
        if self.log_every < 1:
            raise ConfigurationError("log_every must be at least 1")

    @property
    def dynamics_family(self) -> Family:
        return Family.parse(self.family)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _desk(base: str, **changes: Any) -> dict[str, Any]:
    preset = copy.deepcopy(PRESETS[base])
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(preset.get(key), dict):
            preset[key].update(value)
        else:
            preset[key] = value
    return preset


PRESETS: dict[str, dict[str, Any]] = {
    "spring": {
        "family": "spring",
        "background": {"n_fourier": 64, "sigma": 5.0, "n_layers": 6, "width": 64},
        "object": {"n_fourier": 64, "sigma": 2.2, "n_layers": 6, "width": 64},
        "train": {"lr_mlp": 1e-3, "lr_physics": 5e-3, "decay_rate": 0.99954, "decay_steps": 50,
                  "frames_start": 2, "frames_every": 30, "epochs": 1200},
        "loss": {"seg": 0.01, "seg_decay": 0.2, "seg_interval": 100, "attach": 0.05,
                 "outside": 1.0},
        "init": {"k0": 1.5},
    },
    "pendulum-mask": {
        "family": "pendulum",
        "background": None,
        "object": {"n_fourier": 64, "sigma": 0.1, "n_layers": 6, "width": 64},
        "train": {"lr_mlp": 5e-3, "lr_physics": 1e-2, "decay_rate": 1.0,
                  "frames_start": 5, "frames_every": 20, "epochs": 2000},
        "init": {"l0": 1.5, "c0": 0.25},
    },
    "pendulum-synth": {
        "family": "pendulum",
        "background": {"n_fourier": 256, "sigma": 30.0, "n_layers": 8, "width": 512},
        "object": {"n_fourier": 256, "sigma": 10.0, "n_layers": 8, "width": 128},
        "train": {"lr_mlp": 9e-4, "lr_physics": 1e-3, "decay_rate": 0.9, "decay_steps": 25,
                  "frames_start": 5, "frames_every": 10, "epochs": 1200},
        "loss": {"reg": 5e-4, "reg_start_epoch": 400},
        "init": {"l0": 1.9, "c0": 0.6},
    },
    "real-pendulum": {
        "family": "pendulum",
        "background": {"n_fourier": 256, "sigma": 50.0, "n_layers": 8, "width": 512},
        "object": {"n_fourier": 128, "sigma": 15.0, "n_layers": 8, "width": 128},
        "train": {"lr_mlp": 9e-4, "lr_physics": 1e-3, "decay_rate": 0.9, "decay_steps": 25,
                  "frames_start": 5, "frames_every": 20, "epochs": 1200},
        "loss": {"reg": 1e-3, "reg_start_epoch": 100},
        "init": {"l0": 0.4, "c0": 0.5},
    },
    "block": {
        "family": "block",
        "background": {"n_fourier": 256, "sigma": 30.0, "n_layers": 8, "width": 512},
        "object": {"n_fourier": 128, "sigma": 15.0, "n_layers": 8, "width": 128},
        "train": {"lr_mlp": 9e-4, "lr_physics": 1e-3, "decay_rate": 0.9, "decay_steps": 25,
                  "frames_start": 5, "frames_every": 10, "epochs": 1200},
        "loss": {"reg": 1e-3, "reg_start_epoch": 100},
        "init": {"mu0": 0.0},
    },
    "ball": {
        "family": "ball",
        "background": {"n_fourier": 256, "sigma": 30.0, "n_layers": 8, "width": 512},
        "object": {"n_fourier": 128, "sigma": 5.0, "n_layers": 8, "width": 128},
        "train": {"lr_mlp": 9e-4, "lr_physics": 1e-3, "decay_rate": 0.9, "decay_steps": 25,
                  "frames_start": 8, "frames_every": 10, "epochs": 1200},
        "loss": {"reg": 1e-3, "reg_start_epoch": 100},
    },
}

# desk-scale variants of the above for 64x64 scenes on a CPU
PRESETS["pendulum-desk"] = _desk(
    "pendulum-synth",
    background={"n_fourier": 64, "sigma": 6.0, "n_layers": 4, "width": 64},
    object={"n_fourier": 64, "sigma": 2.0, "n_layers": 4, "width": 64},
    train={"lr_mlp": 2e-3, "lr_physics": 5e-3, "batch_size": 8192, "epochs": 200},
    loss={"reg": 5e-4, "reg_start_epoch": 100},
    init={"l0": 1.2, "c0": 0.6},
)
PRESETS["spring-desk"] = _desk(
    "spring",
    background={"n_fourier": 64, "sigma": 5.0, "n_layers": 4, "width": 64},
    object={"n_fourier": 64, "sigma": 2.2, "n_layers": 4, "width": 64},
    train={"batch_size": 8192, "epochs": 300},
)
PRESETS["pendulum-mask-desk"] = _desk(
    "pendulum-mask",
    object={"n_fourier": 64, "sigma": 1.0, "n_layers": 4, "width": 64},
    train={"batch_size": 4096, "epochs": 300},
)


def _merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


# YAML 1.1 reads exponents without a dot (1e-3) as strings
_EXPONENT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _coerce_numbers(value: Any) -> Any:
    if isinstance(value, str) and _EXPONENT.match(value.strip()):
        return float(value)
    if isinstance(value, dict):
        return {k: _coerce_numbers(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_coerce_numbers(v) for v in value]
    return value


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split a `key.path=value` override; the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"Malformed override '{text}'", details="expected key=value")
    try:
        value = _coerce_numbers(yaml.safe_load(raw))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Cannot parse override value '{raw}'", details=str(e)) from e
    return key.strip().split("."), value


def apply_overrides(raw: dict[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    result = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = result
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            if not isinstance(child, dict):
                raise ConfigurationError(f"Override '{text}' descends into a scalar",
                                         details=".".join(path))
            node = child
        node[path[-1]] = value
    return result


def _section(cls: type, raw: Any, key: str) -> Any:
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, Mapping):
        raise ConfigurationError(f"Config section '{key}' must be a mapping",
                                 details=repr(raw))
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"Unknown key(s) in '{key}': {', '.join(unknown)}",
                                 details=f"allowed: {', '.join(sorted(known))}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigurationError(f"Invalid value in '{key}'", details=str(e)) from e


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    """Build a validated RunConfig from a plain mapping (preset keys already merged)."""
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"Unknown config key(s): {', '.join(unknown)}",
                                 details=f"allowed: {', '.join(sorted(known))}")
    if "family" not in raw:
        raise ConfigurationError("Config must name a dynamics family", details="family")

    values = dict(raw)
    background = values.get("background", {})
    values["background"] = None if background is None else _section(FieldConfig, background,
                                                                    "background")
    values["object"] = _section(FieldConfig, values.get("object", {}), "object")
    values["train"] = _section(TrainConfig, values.get("train", {}), "train")
    values["loss"] = _section(LossWeights, values.get("loss", {}), "loss")
    values["init"] = _section(InitConfig, values.get("init", {}), "init")
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigurationError("Invalid run config", details=str(e)) from e


def resolve_config(raw: Mapping[str, Any], overrides: Sequence[str] = (),
                   seed: int | None = None) -> RunConfig:
    """Layer preset < raw mapping < overrides < explicit seed."""
    layered = apply_overrides(dict(raw), overrides)
    preset = layered.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"Unknown preset '{preset}'",
                                     details=", ".join(sorted(PRESETS)))
        layered = _merge(PRESETS[preset], layered)
    if seed is not None:
        layered["seed"] = seed
    config = config_from_dict(layered)
    logger.debug("Resolved config %s", config.config_hash()[:12])
    return config


def load_config(path: str | Path | None, overrides: Sequence[str] = (),
                seed: int | None = None) -> RunConfig:
    """
    Load a JSON or YAML run config.

    Args:
        path: Config file; None starts from an empty mapping (overrides must then name a
            preset or a family).
        overrides: `key.path=value` strings applied after the file.
        seed: Replaces the configured seed when given.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                loaded = yaml.safe_load(handle)
        except FileNotFoundError as e:
            raise ConfigurationError(f"Config file not found: {path}", details=str(path)) from e
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Malformed config file: {path}", details=str(e)) from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError("Config file must contain a mapping", details=str(path))
        raw = _coerce_numbers(loaded or {})
    config = resolve_config(raw, overrides, seed)
    logger.info("Loaded %s config%s (seed %d)", config.family,
                f" from preset {config.preset}" if config.preset else "", config.seed)
    return config


def save_config(config: RunConfig, path: str | Path) -> None:
    write_json(path, config.to_dict())


@dataclass(frozen=True)
class EnvSettings:
    log_level: str = "INFO"
    num_threads: int | None = None


def load_environment() -> EnvSettings:
    """Read PHYSPARAM_* settings from the process environment and an optional .env file."""
    load_dotenv()
    level = os.getenv("PHYSPARAM_LOG_LEVEL", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigurationError(f"Unknown log level '{level}'", details="PHYSPARAM_LOG_LEVEL")
    threads = os.getenv("PHYSPARAM_NUM_THREADS")
    if threads is None or not threads.strip():
        return EnvSettings(log_level=level)
    try:
        count = int(threads)
    except ValueError as e:
        raise ConfigurationError("PHYSPARAM_NUM_THREADS must be an integer",
                                 details=threads) from e
    if count < 1:
        raise ConfigurationError("PHYSPARAM_NUM_THREADS must be at least 1", details=threads)
    return EnvSettings(log_level=level, num_threads=count)
