"""Sparse, early-exit, DVFS-aware transformer inference on an energy-constrained edge accelerator."""

__version__ = "0.1.0"
