"""Toy pixel-space diffusion inpainting with early-stage adversarial protection."""

__version__ = "0.1.0"
