"""Transmission propagation with physics priors for haze, underwater and rain restoration."""

__version__ = "0.1.0"
