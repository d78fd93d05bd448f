"""Causal neural survival clustering.

Mixture of monotone neural cumulative-hazard models for discovering
treatment-response subgroups in censored observational data.
"""

from cnsc.errors import DegenerateDataError, DomainError, NumericError, ShapeError, StateError
from cnsc.model import CnscModel, SubgroupPosterior
from cnsc.synth import GeneratorConfig, GroundTruth, generate

__all__ = [
    "CnscModel",
    "DegenerateDataError",
    "DomainError",
    "GeneratorConfig",
    "GroundTruth",
    "NumericError",
    "ShapeError",
    "StateError",
    "SubgroupPosterior",
    "generate",
]

__version__ = "0.1.0"
