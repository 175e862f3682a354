"""Adversarial weight masking and baselines for backdoor removal, on a small numpy autodiff engine."""

__version__ = "0.1.0"
