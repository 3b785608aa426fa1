"""Desk-scale federated learning simulator with a two-stage poisoning defense."""

__version__ = "0.1.0"
