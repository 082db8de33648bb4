"""Streaming generation with future keyframes on a procedural world."""

from ._kfstream import (
    Model,
    NumericalError,
    PrerequisiteError,
    World,
    config_hash,
    default_config,
    drift,
    evaluate,
    smoothness,
    stream,
    train,
)

__all__ = [
    "Model",
    "NumericalError",
    "PrerequisiteError",
    "World",
    "config_hash",
    "default_config",
    "drift",
    "evaluate",
    "smoothness",
    "stream",
    "train",
]
