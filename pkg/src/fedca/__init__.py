"""Federated contrastive representation learning with a shared negatives dictionary and output alignment."""

__version__ = "0.1.0"
