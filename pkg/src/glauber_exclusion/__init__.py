"""Simulation laboratory for the attractive Glauber-Exclusion process on the torus."""

__version__ = "0.1.0"
