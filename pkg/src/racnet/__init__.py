"""Variable-length volume classification with routing masks and latent anchor sets."""

__version__ = "0.1.0"
