"""Inductive node-wise graph incremental learning laboratory."""

__version__ = "0.1.0"
