"""Federated parameter-efficient fine-tuning with SVD-initialized low-rank adapters."""

__version__ = "0.1.0"
