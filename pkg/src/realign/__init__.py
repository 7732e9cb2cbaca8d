"""Two-stage real-data preference alignment for toy diffusion models."""

__version__ = "0.1.0"
