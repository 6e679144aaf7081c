"""Implicit normalizing flows and residual-flow baselines in numpy."""

__version__ = "0.1.0"
