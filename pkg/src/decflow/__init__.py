"""Counterfactual outcome distributions by debiased deconfounding flows."""

__version__ = "0.1.0"
