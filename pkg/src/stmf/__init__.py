"""Finite-interval mean-flow PDE solver with decoupled space/time consistency losses."""

__version__ = "0.1.0"
