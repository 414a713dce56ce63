"""Desk-scale Gaussian multi-sensor fusion for end-to-end driving."""

__version__ = "0.1.0"
