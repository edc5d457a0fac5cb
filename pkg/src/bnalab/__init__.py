"""Backdoor mitigation by altering normalization statistics of a trained network."""

__version__ = "0.1.0"
