"""Constraint optimization over tree projections, with a simulated parallel machine."""

__version__ = "0.1.0"
