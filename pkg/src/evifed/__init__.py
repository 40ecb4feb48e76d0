"""Desk-scale personalized federated VQA with prefix prompts, evidential
uncertainty and uncertainty-weighted prompt aggregation."""

__version__ = "0.1.0"
