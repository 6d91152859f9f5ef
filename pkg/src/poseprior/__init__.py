"""Diffusion pose prior over a 24-joint kinematic tree."""

from .numcore import DTYPE, NumericError, RngStream, gauss_sample

__all__ = ["DTYPE", "NumericError", "RngStream", "gauss_sample"]
__version__ = "0.1.0"
