"""Desk-scale toolkit for continuous volume scanning, selective state-space
kernels, patch-level momentum contrast, and a toy diffusion training harness."""

__version__ = "0.1.0"
