"""Hierarchical group-relative policy optimization on a simulated device."""

__version__ = "0.1.0"
