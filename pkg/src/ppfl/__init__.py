"""Federated short-term load forecasting with personalization layers and Laplace noise."""

__version__ = "0.1.0"
