"""Decompose the latent code of a frozen generator into additive content and
attribute codes, guided by a pretrained attribute classifier."""

__version__ = "0.1.0"
