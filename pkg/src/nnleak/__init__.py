"""Timing side-channel workbench for embedded neural-network inference."""

__version__ = "0.1.0"
