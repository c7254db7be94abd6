"""Differentiable free-space wave-optics engine and training/evaluation
toolkit for optical generative models."""

__version__ = "0.1.0"
