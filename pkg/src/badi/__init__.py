"""Balanced Area Deprivation Index (bADI) construction and benchmarking."""

__version__ = "0.1.0"
