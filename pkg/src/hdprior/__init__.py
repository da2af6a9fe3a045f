"""Haze-density-prior feature transference for underwater object recognition."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
