"""Geometry-aware latent flow matching for 3D fields with physics-constrained decoding."""
from .errors import NumericalError, VerificationError

__version__ = "0.1.0"

__all__ = ["NumericalError", "VerificationError", "__version__"]
