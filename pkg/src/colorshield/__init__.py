"""Wavelet-denoised color-space ensemble defense and the gradient attacks it
is evaluated against, on a self-contained numpy autodiff engine."""

from . import attacks, autodiff, colorspace, data, defense, denoise, harness, model

__all__ = ["attacks", "autodiff", "colorspace", "data", "defense", "denoise", "harness", "model"]

__version__ = "0.1.0"
