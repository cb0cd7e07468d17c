"""Blind motion deblurring with motion-guided alignment and separable collaborative filtering."""

from .estimator import MISCDeblurrer

__all__ = ["MISCDeblurrer"]
__version__ = "0.1.0"
