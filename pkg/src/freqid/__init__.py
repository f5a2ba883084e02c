"""Frequency-decomposed identity control for a toy video diffusion transformer."""

__version__ = "0.1.0"
