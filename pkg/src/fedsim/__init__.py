"""Federated-learning simulator with activity-based device selection."""

__version__ = "0.1.0"
