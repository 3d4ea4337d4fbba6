"""Kalman-filter parametric feedback cooling of a levitated nanoparticle, in silico."""

from kfcool.errors import (
    CalibrationError,
    FitError,
    InvalidInputError,
    KfcoolError,
    NoPeakError,
    NoSteadyStateError,
    NumericalError,
    ScenarioError,
    StabilityError,
)
from kfcool.model import OpticsConfig, ParticleSpec, PhysicalParams

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "FitError",
    "InvalidInputError",
    "KfcoolError",
    "NoPeakError",
    "NoSteadyStateError",
    "NumericalError",
    "OpticsConfig",
    "ParticleSpec",
    "PhysicalParams",
    "ScenarioError",
    "StabilityError",
]
