"""Spatio-temporal joint models for longitudinal and discrete-time survival data."""

__version__ = "0.1.0"
