"""Spatial Lambda-Fleming-Viot process with selection: simulation, limiting equations and diagnostics."""

__version__ = "0.1.0"
