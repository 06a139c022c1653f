"""Adaptive graph-attention forecasting of multi-reservoir inflow."""

__version__ = "0.1.0"
