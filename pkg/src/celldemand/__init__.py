"""Leakage-aware spatial prediction of cellular traffic demand and its 5G planning impact."""

__version__ = "0.1.0"
