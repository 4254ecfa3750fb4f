"""Desk-scale diffusion retrieval testbed for column CO2 from simulated spectra."""

__version__ = "0.1.0"
