"""Electrically driven nuclear magnetic resonance of donor spins in silicon."""

from ._kernels import BACKEND
from .errors import FitError, NoResonanceError, NumericalError, StepTooCoarseError

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FitError",
    "NoResonanceError",
    "NumericalError",
    "StepTooCoarseError",
    "__version__",
]
