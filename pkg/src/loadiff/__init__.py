"""Conditional diffusion model for probabilistic day-ahead load forecasting."""

__version__ = "0.1.0"
