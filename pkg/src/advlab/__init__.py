"""Adversarial-robustness lab: perturbation surgery and adaptive compression defense."""

__version__ = "0.1.0"
