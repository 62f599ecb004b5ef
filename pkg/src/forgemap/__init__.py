"""Forgery-artifact dissimilarity maps via conditional diffusion, fused with
a detection classifier, on a self-contained numpy numerical core."""

__version__ = "0.1.0"
