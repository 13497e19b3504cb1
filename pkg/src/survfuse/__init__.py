"""Disentangled bimodal survival prediction on synthetic cohorts."""

__version__ = "0.1.0"
