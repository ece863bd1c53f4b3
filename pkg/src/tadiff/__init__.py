"""Treatment-aware diffusion for longitudinal tumour growth prediction."""

__version__ = "0.1.0"
