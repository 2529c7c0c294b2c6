"""Desk-scale physics-guided diffusion distillation for PDE fields."""

__version__ = "0.1.0"
