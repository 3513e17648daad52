"""Belief-propagation contraction of injective PEPS with cluster corrections."""

__version__ = "0.1.0"
