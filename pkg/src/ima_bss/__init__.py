"""Independent mechanism analysis for nonlinear blind source separation."""

__version__ = "0.1.0"
