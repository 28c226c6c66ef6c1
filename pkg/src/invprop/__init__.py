"""Forward-invariance enforcement for neural ODEs via per-step quadratic programs."""

__version__ = "0.1.0"
