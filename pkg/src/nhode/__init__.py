"""Hamiltonian neural ODEs for partially observed mechanical systems."""

__version__ = "0.1.0"
