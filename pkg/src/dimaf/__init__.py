"""Disentangled attention fusion of transcriptomic pathways and slide prototypes for survival."""

__version__ = "0.1.0"

__all__ = ["__version__"]
