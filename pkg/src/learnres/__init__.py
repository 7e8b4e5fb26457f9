"""Learnable image-resolution scaling: scale/distribution losses, a scalar
autodiff tape and a synthetic training simulator."""

__version__ = "0.1.0"
