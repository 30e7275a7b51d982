"""Linear-Gaussian and deep beta-VAE laboratory."""

__version__ = "0.1.0"
