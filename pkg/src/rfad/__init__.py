"""Residual-feature anomaly detection over multi-layer feature tensors."""

__version__ = "0.1.0"
