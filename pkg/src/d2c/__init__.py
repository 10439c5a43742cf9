"""Latent diffusion autoencoders with contrastive representation learning, in NumPy."""

from .config import TrainConfig
from .errors import (
    AcceptanceStarvation,
    ConfigError,
    CorruptFile,
    CorruptHeader,
    D2CError,
    DegenerateLatent,
    DegenerateSchedule,
    NonFiniteLoss,
    NonFiniteOutput,
    TruncatedPayload,
)

__version__ = "0.1.0"

__all__ = [
    "AcceptanceStarvation",
    "ConfigError",
    "CorruptFile",
    "CorruptHeader",
    "D2CError",
    "DegenerateLatent",
    "DegenerateSchedule",
    "NonFiniteLoss",
    "NonFiniteOutput",
    "TrainConfig",
    "TruncatedPayload",
]
