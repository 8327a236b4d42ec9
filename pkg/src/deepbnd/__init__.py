"""Learned boundary conditions for reduced corrector problems in two-scale elasticity."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
