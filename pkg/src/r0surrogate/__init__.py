"""Surrogate models and quantile-band evaluation for ensemble-driven malaria R0 forecasts."""

__version__ = "0.1.0"
