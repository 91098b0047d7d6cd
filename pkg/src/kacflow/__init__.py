"""Kac hard-sphere particle simulator and large-deviations toolkit."""

__version__ = "0.1.0"

from .grid import GridDensity, VelocityGrid
from .measures import BaseMeasure, MacroState, TiltVector

__all__ = [
    "BaseMeasure",
    "GridDensity",
    "MacroState",
    "TiltVector",
    "VelocityGrid",
    "__version__",
]
