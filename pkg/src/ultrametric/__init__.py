"""Ultrametric random matrices: sampling, spectra, characteristic flows and local statistics."""

__version__ = "0.1.0"
