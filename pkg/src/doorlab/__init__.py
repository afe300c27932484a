"""Desk-scale sim-to-real imitation learning with task consistency loss."""

__version__ = "0.1.0"
