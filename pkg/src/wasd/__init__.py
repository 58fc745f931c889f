"""Minimal sufficient neuron-activation rules for model outputs."""

__version__ = "0.1.0"
