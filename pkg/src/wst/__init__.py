"""Weak-to-strong transfer: train a small Teacher policy to write instructions for a larger Student."""

from .core import (
    Episode,
    Generation,
    GrpoConfig,
    Instruction,
    InvalidWeights,
    PreferenceWeights,
    Query,
    RewardVector,
    RunConfig,
    SamplingConfig,
    TaskKind,
    derive_seed,
    load_config,
    validate_weights,
)

__version__ = "0.1.0"

__all__ = [
    "Episode",
    "Generation",
    "GrpoConfig",
    "Instruction",
    "InvalidWeights",
    "PreferenceWeights",
    "Query",
    "RewardVector",
    "RunConfig",
    "SamplingConfig",
    "TaskKind",
    "derive_seed",
    "load_config",
    "validate_weights",
]
