"""Multilingual image-sentence retrieval through a shared universal language space."""

from .errors import MuleError

__version__ = "0.1.0"
__all__ = ["MuleError", "__version__"]
