"""Adversarial imitation and inverse-RL training for dialogue generation."""

__version__ = "0.1.0"
