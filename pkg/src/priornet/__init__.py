"""Dirichlet Prior Networks: uncertainty measures, training and detection harness."""

__version__ = "0.1.0"
