"""Subject-driven next-scale autoregressive image generation, desk scale."""

__version__ = "0.1.0"
