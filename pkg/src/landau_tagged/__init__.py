"""Tagged particle in a mean-field free gas: microscopic simulator, limiting
Landau coefficients, limiting SDE, and the statistical checks tying them together."""

from .potential import PotentialSpec

__all__ = ["PotentialSpec"]
__version__ = "0.1.0"
