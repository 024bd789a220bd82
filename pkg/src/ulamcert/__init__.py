"""Stability certificates for ODEs and first-order quasilinear PDEs."""

__version__ = "0.1.0"
