"""Composable part-based manipulation with SE(3) diffusion primitives."""

__version__ = "0.1.0"
