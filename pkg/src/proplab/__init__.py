"""Computational microlocal analysis of Feynman propagators at desk scale."""

__version__ = "0.1.0"
