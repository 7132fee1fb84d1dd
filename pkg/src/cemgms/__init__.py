"""Constraint energy minimizing multiscale finite elements for parabolic problems."""

__version__ = "0.1.0"
