"""Importance-weighted Gaussian variational EM for multidimensional 2PL models."""

from .gvem import GvemConfig, GvemFit, VariationalState, fit_gvem
from .iw import IwConfig
from .model import LoadingStructure, ModelParams, ResponseMatrix
from .adam import AdamConfig
from .pipeline import FitConfig, FitResult, fit, score_persons
from .rotation import RotationResult, promax

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "FitConfig",
    "FitResult",
    "GvemConfig",
    "GvemFit",
    "IwConfig",
    "LoadingStructure",
    "ModelParams",
    "ResponseMatrix",
    "RotationResult",
    "VariationalState",
    "fit",
    "fit_gvem",
    "promax",
    "score_persons",
]
