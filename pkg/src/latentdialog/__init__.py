"""Dialogue response generation with a diffusion model over a sentence latent.

Everything runs on NumPy through a small reverse-mode autograd engine
(:mod:`latentdialog.tensor`); hot kernels have an optional compiled backend
(:mod:`latentdialog.kernels`).
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
