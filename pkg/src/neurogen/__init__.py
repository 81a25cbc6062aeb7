"""Neurogenesis for multilayer perceptrons: orthogonality-based growth triggers and initializers."""

__version__ = "0.1.0"
