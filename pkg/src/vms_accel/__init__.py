"""Virtual molecule screening: reference and fixed-point kernels plus an accelerator model."""

__version__ = "0.1.0"

__all__ = ["__version__"]
