"""Part-based metric learning with learnable implicit part tokens."""

__version__ = "0.1.0"
