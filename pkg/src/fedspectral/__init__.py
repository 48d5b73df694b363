"""Deterministic federated-learning simulator with data-free contribution scoring."""

__version__ = "0.1.0"
