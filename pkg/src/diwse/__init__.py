"""Simulation and finite-size analysis of device-independent weak string erasure and position verification."""

__version__ = "0.1.0"

from .params import P_OPT, WseParams
from .qcore import BOT, DensityOperator, MeasurementBasis, RngStream

__all__ = ["__version__", "BOT", "P_OPT", "DensityOperator", "MeasurementBasis", "RngStream", "WseParams"]
