"""Structured stochastic variational inference for conditionally conjugate models."""
from .engine import EStep, EStepKind, MStep, RunConfig, RunTrace, Schedule, load_checkpoint, run, save_checkpoint
from .estimators import CollapsedGibbsDPMB, DPMBMixture, StructuredLDA
from .expfam import FAMILIES, Dirichlet, Gamma

__version__ = "0.1.0"

__all__ = [
    "CollapsedGibbsDPMB",
    "DPMBMixture",
    "Dirichlet",
    "EStep",
    "EStepKind",
    "FAMILIES",
    "Gamma",
    "MStep",
    "RunConfig",
    "RunTrace",
    "Schedule",
    "StructuredLDA",
    "load_checkpoint",
    "run",
    "save_checkpoint",
]
