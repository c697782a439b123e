"""Differentiable bento scene synthesis: cyclic text-to-image and layout composition GANs."""

__version__ = "0.1.0"
