"""Cooperative radio map estimation with a conditional GAN."""

__all__ = ["__version__"]
__version__ = "0.1.0"
