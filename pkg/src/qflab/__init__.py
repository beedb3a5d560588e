"""Simulation and learning lab for measurement-and-feedback variational circuits."""

__version__ = "0.1.0"
