"""Sensitivity analysis of softmax temporal attention and a small spatio-temporal forecaster."""

__version__ = "0.1.0"
