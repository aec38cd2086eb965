"""
Training run configuration: key=value files parsed into TrainConfig.

    # comment
    phase=finetune_nowcast
    loss=csi
    steps=2000

Missing keys take the published defaults; unknown keys are rejected.
"""

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from nowcast.errors import ConfigParseError, InvalidValue, UnknownKey
from nowcast.grid_io import DEFAULT_R_MAX
from nowcast.losses import DEFAULT_GAMMA, LOSS_CHOICES
from nowcast.model import (
    ESTIMATION_IN_CHANNELS,
    ESTIMATION_OUT_CHANNELS,
    NOWCAST_IN_CHANNELS,
    NOWCAST_OUT_CHANNELS,
    ModelConfig,
)

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune_nowcast", "finetune_estimation")
TASKS = ("nowcast", "estimation")
THREADS_ENV = "NOWCAST_THREADS"

PHASE_STEPS = {"pretrain": 50000, "finetune_nowcast": 35000, "finetune_estimation": 35000}
PHASE_BATCH = {"pretrain": 20, "finetune_nowcast": 24, "finetune_estimation": 24}


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune_nowcast"
    task: str = "nowcast"
    loss: str = "csi"
    gamma: float = DEFAULT_GAMMA
    steps: int = 35000
    batch_size: int = 24
    learning_rate: float = 2e-5
    validation_interval: int = 1000
    seed: int = 0
    depth: int = 2
    base_channels: int = 16
    input_hw: int = 64
    r_max: int = DEFAULT_R_MAX
    pool_factor: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvalidValue("phase", f"expected one of {PHASES}, got {self.phase!r}")
        if self.task not in TASKS:
            raise InvalidValue("task", f"expected one of {TASKS}, got {self.task!r}")
        if self.phase == "finetune_estimation" and self.task != "estimation":
            object.__setattr__(self, "task", "estimation")
        if self.loss not in LOSS_CHOICES:
            raise InvalidValue("loss", f"expected one of {LOSS_CHOICES}, got {self.loss!r}")
        if self.gamma < 0:
            raise InvalidValue("gamma", f"must be non-negative, got {self.gamma}")
        for key in ("steps", "batch_size", "validation_interval", "base_channels", "input_hw", "r_max", "threads"):
            if getattr(self, key) <= 0:
                raise InvalidValue(key, f"must be positive, got {getattr(self, key)}")
        if not self.learning_rate > 0:
            raise InvalidValue("learning_rate", f"must be positive, got {self.learning_rate}")
        if self.depth < 0:
            raise InvalidValue("depth", f"must be non-negative, got {self.depth}")
        if self.pool_factor not in (1, 2, 4):
            raise InvalidValue("pool_factor", f"must be 1, 2 or 4, got {self.pool_factor}")
        if not -(2 ** 63) <= self.seed < 2 ** 63:
            raise InvalidValue("seed", "must fit in 64 bits")

    @classmethod
    def for_phase(cls, phase, **values):
        """Defaults of the given phase, updated with values."""
        base = {"phase": phase, "steps": PHASE_STEPS.get(phase, 35000), "batch_size": PHASE_BATCH.get(phase, 24)}
        if phase == "finetune_estimation":
            base["task"] = "estimation"
        base.update(values)
        return cls(**base)

    @property
    def model(self):
        in_channels = NOWCAST_IN_CHANNELS if self.task == "nowcast" else ESTIMATION_IN_CHANNELS
        if self.phase == "pretrain":
            out_channels = self.r_max
        elif self.phase == "finetune_nowcast":
            out_channels = NOWCAST_OUT_CHANNELS
        else:
            out_channels = ESTIMATION_OUT_CHANNELS
        return ModelConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            in_channels=in_channels,
            out_channels=out_channels,
            input_hw=self.input_hw,
        )

    def with_overrides(self, **overrides):
        given = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **given) if given else self

    def as_dict(self):
        return asdict(self)

    def to_text(self):
        """key=value lines that load_config reads back to an equal config."""
        return "".join(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n"
                       for key, value in self.as_dict().items())


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_CONVERTERS = {"str": str, "int": int, "float": float}


def _convert(key, raw):
    kind = _FIELD_TYPES[key]
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        return _CONVERTERS[kind](raw)
    except ValueError:
        raise InvalidValue(key, f"cannot read {raw!r} as {kind}") from None


def parse_config_text(text):
    """Parse key=value lines into a dict of typed values."""
    values = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(line_number, f"expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not key:
            raise ConfigParseError(line_number, "missing key before '='")
        if key not in _FIELD_TYPES:
            raise UnknownKey(key, line_number)
        if key in values:
            logger.warning("Key %s given twice, line %d wins", key, line_number)
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, **overrides):
    """
    Read a TrainConfig from a key=value file (or the defaults when path is
    None), then apply non-None overrides.
    """
    values = parse_config_text(Path(path).read_text()) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})

    loss = values.get("loss", "csi")
    if "gamma" in values and loss != "focal":
        logger.warning("gamma=%s is ignored with loss=%s", values["gamma"], loss)

    config = TrainConfig.for_phase(values.pop("phase", "finetune_nowcast"), **values)
    logger.info("Loaded config %s: phase=%s steps=%d batch=%d lr=%g",
                path or "<defaults>", config.phase, config.steps, config.batch_size, config.learning_rate)
    return config


def effective_threads(config):
    """NOWCAST_THREADS, when set, replaces the configured thread count."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return config.threads
    try:
        threads = int(raw)
    except ValueError:
        raise InvalidValue(THREADS_ENV, f"cannot read {raw!r} as int") from None
    if threads <= 0:
        raise InvalidValue(THREADS_ENV, f"must be positive, got {threads}")
    return threads
