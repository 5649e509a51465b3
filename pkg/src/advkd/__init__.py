"""Adversarial distillation of a multi-step diffusion teacher into a one-pass staged generator."""

__version__ = "0.1.0"
