"""Wavelet diffusion transformer for microaneurysm detection by pseudo-normal reconstruction."""

__version__ = "0.1.0"
