"""Age-structured mortality modelling with ensemble Kalman filtering."""

__version__ = "0.1.0"
