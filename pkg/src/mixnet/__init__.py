"""Mixture-of-experts acoustic frame classifiers (MixNet) and baselines."""

__version__ = "0.1.0"
