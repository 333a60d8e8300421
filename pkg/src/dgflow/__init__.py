"""Variational solvers and duality certificates for doubly nonlinear gradient flows."""
__version__ = "0.1.0"
