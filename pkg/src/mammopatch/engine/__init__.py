"""CPU training engine: kernel backends, layers, networks, and the optimizer."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
