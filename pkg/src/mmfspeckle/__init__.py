"""Multimode-fiber speckle simulation and configuration-training experiments."""

__version__ = "0.1.0"
