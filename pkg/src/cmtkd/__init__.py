"""Collaborative multi-teacher distillation for low-bit CNNs, on a small numpy autograd core."""

__version__ = "0.1.0"
