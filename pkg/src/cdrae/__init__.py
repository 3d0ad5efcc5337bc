"""Coupled-autoencoder cross-domain recommendation (CACDR and LFACDR) in numpy."""

__version__ = "0.1.0"
