"""Ensemble flood forecasting with a precomputed hazard datacube and a tempered particle filter."""

__version__ = "0.1.0"
