"""Fault-tolerant control workbench.

Simulated plants with injectable sensor faults, Bayesian controllers with
online precision learning, residual-based fault detection (including the
Gamma-rate beta residual), and a deterministic experiment harness.
"""

from . import controllers, detection, faults, harness, plants, precision, stats

__all__ = [
    "controllers",
    "detection",
    "faults",
    "harness",
    "plants",
    "precision",
    "stats",
]

__version__ = "0.1.0"
