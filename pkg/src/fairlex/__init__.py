"""FAIR repository toolkit for versioned lexicographic and corpus data."""

__version__ = "0.1.0"

from .errors import FairlexError

__all__ = ["FairlexError", "__version__"]
