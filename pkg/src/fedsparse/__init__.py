"""Federated training of sparse binary masks over frozen random networks."""

__version__ = "0.1.0"
