"""Numerical lab for softmax-attention training dynamics and benign overfitting."""
__version__ = "0.1.0"
