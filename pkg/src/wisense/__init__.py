"""Wireless perception pipeline coupled to a pricing-game simulation."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
